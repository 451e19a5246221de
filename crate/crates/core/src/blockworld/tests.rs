use super::*;

fn reach_red() -> TaskSpec {
    TaskSpec::new(TaskFamily::Reach, Color::Red)
}

#[test]
fn vocabulary_is_stable() {
    let v = instructions();
    assert_eq!(v.len(), VOCAB_SIZE);
    assert_eq!(v[0], "reach the red block");
    assert_eq!(v[10], "pick blue block");
    for id in 0..VOCAB_SIZE {
        assert_eq!(TaskSpec::from_instruction(id).unwrap().instruction, id);
    }
    assert!(TaskSpec::from_instruction(VOCAB_SIZE).is_err());
}

#[test]
fn reset_is_deterministic() {
    for fam in TaskFamily::ALL {
        let t = TaskSpec::new(fam, Color::Blue);
        assert_eq!(reset(11, &t, 2).unwrap(), reset(11, &t, 2).unwrap());
        assert_ne!(reset(11, &t, 2).unwrap(), reset(12, &t, 2).unwrap());
    }
    assert_eq!(reset(3, &reach_red(), 0).unwrap().objects.len(), 1);
}

#[test]
fn resets_never_overlap() {
    let fams = TaskFamily::ALL;
    for seed in 0..10_000u64 {
        let t = TaskSpec::new(fams[seed as usize % fams.len()], Color::ALL[seed as usize % 4]);
        let s = reset(seed, &t, (seed % 4) as usize).unwrap();
        let mut pts: Vec<[f64; 2]> = s.objects.iter().map(|o| o.pos).collect();
        pts.extend(s.goal);
        for i in 0..pts.len() {
            for j in i + 1..pts.len() {
                let d = ((pts[i][0] - pts[j][0]).powi(2) + (pts[i][1] - pts[j][1]).powi(2)).sqrt();
                // two 0.1-wide squares overlap only when centres are closer than 0.1 * sqrt(2)
                assert!(d > 0.1 * 2f64.sqrt(), "seed {seed}: {pts:?}");
            }
        }
        assert_eq!(s.objects[s.target].shape, t.shape);
    }
}

#[test]
fn step_examples() {
    let mut s = reset(0, &reach_red(), 1).unwrap();
    let before = s.clone();
    s.step(before.pose);
    assert_eq!(s.step, 1);
    assert_eq!(s.pose, before.pose);
    assert_eq!(s.objects, before.objects);

    // 0.16 along x takes exactly two capped moves
    let mut s = before.clone();
    s.pose = [0.2, 0.5, 0.4, 0.0];
    let target = [0.36, 0.5, 0.4, 0.0];
    s.step(target);
    assert!((s.pose[0] - 0.28).abs() < 1e-12);
    s.step(target);
    assert!((s.pose[0] - 0.36).abs() < 1e-12);

    let mut s = before;
    for _ in 0..40 {
        s.step([2.0, -1.0, 5.0, 3.0]);
    }
    assert_eq!(s.pose, [1.0, 0.0, 1.0, 1.0]);
}

#[test]
fn render_is_deterministic_and_background_uniform() {
    let mut s = reset(5, &reach_red(), 0).unwrap();
    assert_eq!(render_rgb(&s), render_rgb(&s));
    s.objects.clear();
    s.pose = [0.5, 0.5, 0.3, 0.0];
    let img = render_rgb(&s);
    let n = IMG_SIZE;
    for py in 0..n {
        for px in 0..n {
            let (x, y) = ((px as f64 + 0.5) / n as f64, (py as f64 + 0.5) / n as f64);
            let (dx, dy) = ((x - 0.5).abs(), (y - 0.5).abs());
            if dx > 0.05 || dy > 0.05 {
                assert_eq!(&img[(py * n + px) * 3..(py * n + px) * 3 + 3], &[0.55, 0.5, 0.42]);
            }
        }
    }
    assert!(render_depth(&s).iter().all(|&d| (0.0..=1.0).contains(&d)));
}

#[test]
fn moving_an_object_touches_only_its_boxes() {
    let mut s = reset(9, &reach_red(), 2).unwrap();
    s.pose = [0.05, 0.05, 0.3, 0.0];
    let a = render_rgb(&s);
    let old = s.objects[0].pos;
    let cell = 1.0 / IMG_SIZE as f64;
    s.objects[0].pos[0] += cell;
    let new = s.objects[0].pos;
    let b = render_rgb(&s);
    let in_box = |c: [f64; 2], x: f64, y: f64| (x - c[0]).abs() <= 0.05 && (y - c[1]).abs() <= 0.05;
    for py in 0..IMG_SIZE {
        for px in 0..IMG_SIZE {
            let (x, y) = ((px as f64 + 0.5) * cell, (py as f64 + 0.5) * cell);
            let i = (py * IMG_SIZE + px) * 3;
            if a[i..i + 3] != b[i..i + 3] {
                assert!(in_box(old, x, y) || in_box(new, x, y), "pixel {px},{py} changed");
            }
        }
    }
    assert_ne!(a, b);
}

#[test]
fn depth_matches_visible_surface() {
    let mut s = reset(2, &TaskSpec::new(TaskFamily::Pick, Color::Green), 1).unwrap();
    s.pose = [0.02, 0.02, 0.7, 0.0];
    let d = render_depth(&s);
    let rgb = render_rgb(&s);
    let o = s.objects[0].pos;
    let px = ((o[0] * IMG_SIZE as f64) as usize).min(IMG_SIZE - 1);
    let py = ((o[1] * IMG_SIZE as f64) as usize).min(IMG_SIZE - 1);
    let i = py * IMG_SIZE + px;
    assert!((d[i] - BLOCK_HEIGHT as f32).abs() < 1e-6);
    assert_eq!(&rgb[i * 3..i * 3 + 3], &Color::Green.rgb());
}

#[test]
fn fresh_reset_is_not_success() {
    for fam in TaskFamily::ALL {
        for seed in 0..200 {
            let s = reset(seed, &TaskSpec::new(fam, Color::Yellow), 2).unwrap();
            assert!(!check_success(&s), "{fam:?} seed {seed}");
        }
    }
}

#[test]
fn success_predicates() {
    let mut s = reset(1, &reach_red(), 0).unwrap();
    let p = s.objects[0].pos;
    s.pose = [p[0] + 0.049, p[1], 0.3, 0.0];
    assert!(check_success(&s));
    s.pose[0] = p[0] + 0.051;
    assert!(!check_success(&s));

    let mut s = reset(1, &TaskSpec::new(TaskFamily::Pick, Color::Red), 0).unwrap();
    s.objects[0].held = true;
    s.pose[2] = 0.5;
    assert!(check_success(&s));
    s.pose[2] = 0.49;
    assert!(!check_success(&s));
}

#[test]
fn expert_reaches_quickly() {
    for seed in 0..500 {
        for c in Color::ALL {
            let s = reset(seed, &TaskSpec::new(TaskFamily::Reach, c), 1).unwrap();
            let (states, ok) = expert_episode(s, EXPERT_MAX_STEPS).unwrap();
            assert!(ok && states.len() - 1 <= 30, "seed {seed}: {} steps", states.len() - 1);
        }
    }
}

#[test]
fn expert_at_goal_holds_pose() {
    let mut s = reset(4, &reach_red(), 0).unwrap();
    let p = s.objects[0].pos;
    s.pose = [p[0], p[1], 0.4, 0.0];
    assert_eq!(expert_action(&s).unwrap(), s.pose);
}

#[test]
fn expert_soundness_and_physics() {
    for fam in TaskFamily::ALL {
        let mut wins = 0;
        let mut total_len = 0;
        for seed in 0..500u64 {
            let t = TaskSpec::new(fam, Color::ALL[seed as usize % 4]);
            let s = reset(seed, &t, (seed % 3) as usize).unwrap();
            let (states, ok) = expert_episode(s, EXPERT_MAX_STEPS).unwrap();
            wins += usize::from(ok);
            total_len += states.len() - 1;
            for w in states.windows(2) {
                let (a, b) = (&w[0], &w[1]);
                for o in &b.objects {
                    assert!(o.pos.iter().all(|v| (0.0..=1.0).contains(v)));
                    if o.held {
                        assert_eq!(o.pos, b.xy());
                    }
                }
                assert!(b.objects.iter().filter(|o| o.held).count() <= 1);
                // a grasp only starts within the grasp radius
                for (oa, ob) in a.objects.iter().zip(&b.objects) {
                    if !oa.held && ob.held {
                        let d = ((oa.pos[0] - b.pose[0]).powi(2) + (oa.pos[1] - b.pose[1]).powi(2)).sqrt();
                        assert!(d <= GRASP_RADIUS + 1e-12);
                    }
                }
            }
        }
        let rate = wins as f64 / 500.0;
        let mean = total_len as f64 / 500.0;
        assert!(rate >= 0.99, "{fam:?}: success {rate}");
        assert!(mean <= 60.0, "{fam:?}: mean length {mean}");
    }
}

#[test]
fn trajectories_are_reproducible() {
    let t = TaskSpec::new(TaskFamily::Place, Color::Blue);
    let run = || {
        let s = reset(77, &t, 2).unwrap();
        let (states, _) = expert_episode(s, EXPERT_MAX_STEPS).unwrap();
        states.iter().map(render_rgb).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
