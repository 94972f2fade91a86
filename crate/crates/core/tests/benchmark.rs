//! End-to-end runs on the synthetic benchmark.

use geofew::config::RunConfig;
use geofew::datasets::Split;
use geofew::evaluation::{accuracy_on_split, summarize};
use geofew::pipeline;

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    summarize(&xs.collect::<Vec<_>>()).unwrap().mean
}

#[test]
fn stage1_separates_tight_blobs() {
    let mut cfg = RunConfig::default();
    cfg.data.noise_sigma = 0.1;
    let (base, _) = pipeline::synthetic_views(&cfg).unwrap();
    assert_eq!(base.categories().len(), 10);
    assert_eq!(base.dim(), 16);
    let (net, history) = pipeline::train_base(&cfg, &base).unwrap();

    let losses: Vec<f64> = history.epochs.iter().map(|e| e.l_total).collect();
    assert!(losses.iter().all(|l| l.is_finite()));
    assert!(losses.windows(2).all(|w| w[1] <= w[0]), "{losses:?}");
    assert!(history.final_scale >= 1.0);
    let val = accuracy_on_split(&net, &base, Split::Val).unwrap();
    assert!(val >= 0.95, "{val}");
}

#[test]
fn incremental_stages_keep_base_and_gain_novel() {
    let cfg = RunConfig::default();
    let (base, pool) = pipeline::synthetic_views(&cfg).unwrap();
    let (net, _) = pipeline::train_base(&cfg, &base).unwrap();
    let base_acc = accuracy_on_split(&net, &base, Split::Test).unwrap();

    let schedule = [1, 2, 5, 10, 20];
    let episodes = pipeline::schedule_episodes(&cfg, &base, &pool, &schedule).unwrap();
    let runs = pipeline::incremental_episodes(&cfg, &net, &base, &pool, &episodes, &schedule, None).unwrap();
    for stages in &runs {
        assert!(stages.iter().all(|s| s.metrics.acc_base == base_acc));
    }

    let novel: Vec<f64> = (0..schedule.len())
        .map(|t| mean(runs.iter().map(|r| r[t].metrics.acc_novel)))
        .collect();
    assert!(novel.windows(2).all(|w| w[1] >= w[0] - 0.02), "{novel:?}");
    let both = |t: usize| mean(runs.iter().map(|r| r[t].metrics.acc_both));
    assert!(both(schedule.len() - 1) >= both(0));
}
