//! Behavior-model training on a single-source dataset, where the
//! maximum-likelihood answer is known.

use behavior_forge::behavior::{train_behavior_model, CurveLog, TrainConfig};
use behavior_forge::dataset::generate_dataset;
use behavior_forge::env::{EnvConfig, SCRIPTED_STD};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Means of `key` over disjoint windows of `window` steps, from log records
/// written every `every` steps.
fn window_means(log: &CurveLog, key: &str, every: usize, window: usize) -> Vec<f64> {
    let per = window / every;
    log.series(key)
        .chunks_exact(per)
        .map(|c| c.iter().map(|(_, v)| v).sum::<f64>() / per as f64)
        .collect()
}

#[test]
fn single_source_fit_recovers_the_scripted_spread() {
    let env = EnvConfig::new(1);
    let ds = generate_dataset(&env, 1, 30, 8).unwrap();
    let tc = TrainConfig {
        total_steps: 4000,
        seed: 8,
        ..TrainConfig::default()
    };
    let out = train_behavior_model(&ds, 1, &tc).unwrap();

    // Spread at held-out states visited by the same source.
    let held_out = generate_dataset(&env, 1, 10, 9).unwrap();
    let e = out.model.nets.policy.codebook;
    let e0 = out.model.nets.store.get(e).row_slice(0).to_vec();
    let mut total = 0.0;
    let mut n = 0;
    for t in &held_out.trajectories {
        for s in &t.states {
            let d = out.model.nets.policy.action_distribution(&out.model.nets.store, &e0, s).unwrap();
            total += d.std().iter().sum::<f64>();
            n += d.std().len();
        }
    }
    let sigma = total / n as f64;
    assert!(
        sigma > SCRIPTED_STD / 2.0 && sigma < SCRIPTED_STD * 2.0,
        "mean fitted std {sigma} vs scripted {SCRIPTED_STD}"
    );

    let windows = window_means(&out.log, "rec", tc.log_every, 1000);
    for pair in windows[1..].windows(2) {
        assert!(pair[1] <= pair[0], "smoothed L_rec rose: {windows:?}");
    }
}
