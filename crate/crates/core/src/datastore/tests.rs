use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::blockworld::{reset, Color, TaskFamily, TaskSpec, EXPERT_MAX_STEPS, POSE_DIM};

fn synthetic(t: usize, pose: bool, depth: bool) -> Episode {
    Episode {
        instruction: 3,
        rgb: (0..t * FRAME_LEN).map(|i| (i % 251) as u8).collect(),
        depth: depth.then(|| (0..t * DEPTH_LEN).map(|i| (i % 7) as f32 * 0.1).collect()),
        poses: pose.then(|| (0..t * POSE_DIM).map(|i| (i % 10) as f32 * 0.1).collect()),
    }
}

#[test]
fn round_trip_all_flag_combinations() {
    for (p, d) in [(true, true), (true, false), (false, false)] {
        let ep = synthetic(5, p, d);
        let back = Episode::from_bytes(&ep.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ep);
        assert_eq!(back.pose_dim(), p.then_some(POSE_DIM));
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e.pade");
    let ep = synthetic(4, true, true);
    write_episode(&ep, &path).unwrap();
    assert_eq!(read_episode(&path).unwrap(), ep);
}

#[test]
fn corrupt_files_are_rejected() {
    let bytes = synthetic(3, true, false).to_bytes().unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Episode::from_bytes(&bad), Err(DataError::Magic)));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(Episode::from_bytes(&bad), Err(DataError::Version(9))));
    assert!(matches!(
        Episode::from_bytes(&bytes[..bytes.len() - 3]),
        Err(DataError::Length { .. })
    ));
    assert!(matches!(Episode::from_bytes(&bytes[..10]), Err(DataError::Length { .. })));
    let mut nan = synthetic(3, true, false);
    nan.poses.as_mut().unwrap()[2] = f32::NAN;
    assert!(nan.to_bytes().is_err());
    assert!(synthetic(1, false, false).to_bytes().is_err());
}

#[test]
fn window_clamps_at_episode_end() {
    assert_eq!(window_indices(0, 3, 2, 10), vec![2, 4, 6]);
    assert_eq!(window_indices(7, 3, 2, 10), vec![9, 9, 9]);
    assert_eq!(window_indices(9, 2, 1, 10), vec![9, 9]);
    let ep = synthetic(6, true, true);
    let ex = window_at(&ep, 4, 3, 1).unwrap();
    assert_eq!(ex.targets, vec![5, 5, 5]);
    assert_eq!(ex.target_rgb[2], ep.frame_f32(5));
    assert_eq!(ex.target_pose.as_ref().unwrap()[0], ep.pose(5).unwrap());
    assert_eq!(ex.cond_depth.as_deref(), ep.depth_map(4));
    assert!(window_at(&ep, 6, 3, 1).is_err());
}

#[test]
fn sample_window_covers_every_start() {
    let ep = synthetic(5, false, false);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut seen = [0usize; 5];
    for _ in 0..2000 {
        seen[sample_window(&ep, 2, 1, &mut rng).unwrap().start] += 1;
    }
    for c in seen {
        assert!((300..500).contains(&c), "{seen:?}");
    }
}

#[test]
fn mixed_batch_composition() {
    let robot = vec![synthetic(4, true, true)];
    let video = vec![synthetic(4, false, false)];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (frac, n_video) in [(0.25, 4), (0.3, 4), (0.0, 0), (1.0, 16)] {
        let b = mixed_batch(&robot, &video, 16, frac, 2, 1, &mut rng).unwrap();
        assert_eq!(b.len(), 16);
        assert_eq!(b.iter().filter(|e| !e.has_action()).count(), n_video);
        assert!(b.iter().all(|e| e.has_action() == e.has_depth()));
    }
    assert!(matches!(
        mixed_batch(&robot, &[], 16, 0.25, 2, 1, &mut rng),
        Err(DataError::EmptySource("video"))
    ));
    assert!(mixed_batch(&robot, &[], 16, 0.0, 2, 1, &mut rng).is_ok());
    assert!(matches!(
        mixed_batch(&[], &video, 16, 0.5, 2, 1, &mut rng),
        Err(DataError::EmptySource("robot"))
    ));
    // robot episodes can stand in for video by dropping their labels
    let b = mixed_batch(&robot, &robot, 8, 0.5, 2, 1, &mut rng).unwrap();
    assert_eq!(b.iter().filter(|e| !e.has_action()).count(), 4);
}

#[test]
fn expert_episode_to_bundle() {
    let s = reset(5, &TaskSpec::new(TaskFamily::Reach, Color::Red), 1).unwrap();
    let ep = record_expert_episode(s.clone(), true, EXPERT_MAX_STEPS).unwrap().unwrap();
    assert_eq!(ep.kind(), EpisodeKind::Robot);
    assert_eq!(ep.pose(0).unwrap()[0], s.pose[0] as f32);
    assert_eq!(ep.frame(0), &render_rgb_bytes(&s)[..]);

    let mut cfg = PadConfig::mini();
    let ex = window_at(&ep, 0, cfg.k, cfg.frame_interval).unwrap();
    let b = ex.to_bundle::<f32>(&cfg).unwrap();
    b.validate(&cfg).unwrap();
    assert!(b.depth_cond.is_none());
    assert!(b.pose_cond.as_ref().unwrap().data().iter().all(|v| (-1.0..=1.0).contains(v)));
    cfg.depth_enabled = true;
    let b = ex.to_bundle::<f32>(&cfg).unwrap();
    b.validate(&cfg).unwrap();
    assert!(b.depth_target.is_some());

    let v = window_at(&ep.video_only(), 0, cfg.k, cfg.frame_interval).unwrap().to_bundle::<f32>(&cfg).unwrap();
    assert!(v.pose_cond.is_none() && v.depth_cond.is_none());
}

fn render_rgb_bytes(s: &EnvState) -> Vec<u8> {
    blockworld::render_rgb(s).into_iter().map(quantize).collect()
}

#[test]
fn dataset_round_trip_and_bad_index() {
    let dir = tempfile::tempdir().unwrap();
    let robot = vec![synthetic(3, true, false), synthetic(4, true, true)];
    let video = vec![synthetic(5, false, false)];
    Dataset::write(dir.path(), &robot, &video).unwrap();
    let ds = Dataset::load(dir.path()).unwrap();
    assert_eq!(ds.robot, robot);
    assert_eq!(ds.video, video);

    fs::write(
        dir.path().join("index.json"),
        r#"{"episodes":[{"file":"episode_00002.pade","kind":"robot"}]}"#,
    )
    .unwrap();
    assert!(matches!(Dataset::load(dir.path()), Err(DataError::Index(_))));
    fs::write(dir.path().join("index.json"), r#"{"episodes":[{"file":"../x","kind":"robot"}]}"#).unwrap();
    assert!(matches!(Dataset::load(dir.path()), Err(DataError::Index(_))));
}

#[test]
fn generation_is_exact_and_deterministic() {
    let spec = GenSpec {
        instructions: vec![0, 2],
        robot_episodes: 6,
        video_episodes: 4,
        seed: 7,
        ..GenSpec::default()
    };
    let (r, v) = generate(&spec).unwrap();
    assert_eq!((r.len(), v.len()), (6, 4));
    assert!(r.iter().all(|e| e.kind() == EpisodeKind::Robot && e.depth.is_some()));
    assert!(v.iter().all(|e| e.kind() == EpisodeKind::Video));
    assert_eq!(r[0].instruction, 0);
    assert_eq!(r[1].instruction, 2);
    // the video split never reuses a robot episode
    assert!(v.iter().all(|e| r.iter().all(|x| x.rgb != e.rgb)));
    assert_eq!(generate(&spec).unwrap(), (r.clone(), v.clone()));
    let shifted = generate(&GenSpec {
        video_domain_shift: true,
        ..spec.clone()
    })
    .unwrap();
    assert_eq!(shifted.0, r);
    assert_eq!(shifted.1[0].rgb[0], v[0].rgb[1]);
}
