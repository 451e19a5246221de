use std::fs;

use pad_core::datastore::{generate, Dataset, GenSpec};
use pad_core::padnet::PadConfig;
use pad_core::trainkit::{train, TrainConfig, TrainRun};

const STEPS: u64 = 2000;
const WINDOW: usize = 200;

// Four robot episodes, adapt phase only, PAD-mini.
#[test]
fn four_episode_overfit() {
    let cfg = PadConfig::mini();
    let spec = GenSpec {
        robot_episodes: 4,
        video_episodes: 0,
        with_depth: false,
        seed: 11,
        ..GenSpec::default()
    };
    let (robot, video) = generate(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let data = Dataset {
        dir: dir.path().join("data"),
        robot,
        video,
    };
    let run = TrainRun {
        init_seed: 0,
        pretrain: TrainConfig {
            total_steps: 0,
            ..TrainConfig::pretrain_default()
        },
        adapt: TrainConfig {
            total_steps: STEPS,
            ramp_steps: STEPS,
            video_fraction: 0.0,
            checkpoint_every: 0,
            ..TrainConfig::adapt_default()
        },
    };
    let out = train(&run, &cfg, &data, &dir.path().join("train"), None).unwrap();
    let text = fs::read_to_string(out.metrics).unwrap();
    let total: Vec<f64> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(4).unwrap().parse().unwrap())
        .collect();
    assert_eq!(total.len(), STEPS as usize);

    let avg = |end: usize| total[end - WINDOW..end].iter().sum::<f64>() / WINDOW as f64;
    let windows: Vec<f64> = (1..=total.len() / WINDOW).map(|w| avg(w * WINDOW)).collect();
    eprintln!("window means: {windows:.4?}");
    for pair in windows.windows(2).skip(500 / WINDOW) {
        assert!(pair[1] <= pair[0] * 1.05, "moving average rose: {pair:?}");
    }
    let last = *windows.last().unwrap();
    assert!(last < 0.05, "final combined loss {last}");
}
