use std::collections::VecDeque;
use std::sync::Arc;

use catnav::env::*;
use proptest::prelude::*;

fn cfg(kind: TaskKind) -> GeneratorConfig {
    GeneratorConfig { kind, ..GeneratorConfig::default() }
}

/// Plain BFS written independently of the library's distance field.
fn bfs(spec: &GridSpec, from: Cell, to: Cell) -> Option<u32> {
    if !spec.is_free(from) || !spec.is_free(to) {
        return None;
    }
    let (w, h) = (spec.width as i32, spec.height as i32);
    let mut seen = vec![false; spec.width * spec.height];
    let mut q = VecDeque::from([(from, 0u32)]);
    seen[(from.y * w + from.x) as usize] = true;
    while let Some((c, d)) = q.pop_front() {
        if c == to {
            return Some(d);
        }
        for (dx, dy) in [(0, -1), (1, 0), (0, 1), (-1, 0)] {
            let n = Cell::new(c.x + dx, c.y + dy);
            if n.x < 0 || n.y < 0 || n.x >= w || n.y >= h || spec.is_wall(n) {
                continue;
            }
            let i = (n.y * w + n.x) as usize;
            if !seen[i] {
                seen[i] = true;
                q.push_back((n, d + 1));
            }
        }
    }
    None
}

fn reset(spec: GridSpec, task: TaskInstance) -> (EnvState, Observation) {
    EnvState::reset(Arc::new(spec), task, EnvConfig::default()).unwrap()
}

#[test]
fn sampling_is_deterministic() {
    for kind in [TaskKind::PointNav, TaskKind::ObjectNav] {
        assert_eq!(sample_task(&cfg(kind), 7).unwrap(), sample_task(&cfg(kind), 7).unwrap());
        assert_ne!(sample_task(&cfg(kind), 7).unwrap(), sample_task(&cfg(kind), 8).unwrap());
    }
}

#[test]
fn thousand_samples_are_reachable_by_independent_bfs() {
    for kind in [TaskKind::PointNav, TaskKind::ObjectNav] {
        let c = cfg(kind);
        for seed in 0..1000 {
            let (spec, task) = sample_task(&c, seed).unwrap();
            assert!(spec.is_free(task.start.cell));
            for (_, o) in spec.objects() {
                assert!(spec.is_free(o));
            }
            let region = task.success_region(&spec).unwrap();
            let best = region.iter().filter_map(|r| bfs(&spec, task.start.cell, *r)).min();
            let d = best.unwrap_or_else(|| panic!("seed {seed}: goal unreachable"));
            assert!(d >= 1 && d as usize <= task.max_steps);
        }
    }
}

#[test]
fn open_grid_distance_is_manhattan() {
    let c = GeneratorConfig { wall_density: 0.0, ..cfg(TaskKind::PointNav) };
    for seed in 0..200 {
        let (spec, task) = sample_task(&c, seed).unwrap();
        let Goal::Point(g) = task.goal else { unreachable!() };
        assert_eq!(shortest_path_length(&spec, task.start.cell, g), Some(task.start.cell.manhattan(g)));
    }
}

#[test]
fn shortest_path_examples() {
    let open = GridSpec::empty(3, 3, 1);
    assert_eq!(shortest_path_length(&open, Cell::new(1, 1), Cell::new(1, 1)), Some(0));
    assert_eq!(shortest_path_length(&open, Cell::new(0, 0), Cell::new(2, 2)), Some(4));
    let detour = GridSpec::parse_map("A#G.\n.#..\n....\n").unwrap();
    let goal = detour.point_goal.unwrap();
    assert_eq!(shortest_path_length(&detour.spec, detour.start.unwrap(), goal), Some(6));
    let sealed = GridSpec::parse_map("A#G\n.#.\n.#.\n").unwrap();
    assert_eq!(shortest_path_length(&sealed.spec, sealed.start.unwrap(), sealed.point_goal.unwrap()), None);
}

#[test]
fn invalid_generator_configs_are_rejected() {
    for bad in [
        GeneratorConfig { width: 3, ..GeneratorConfig::default() },
        GeneratorConfig { wall_density: 0.4, ..GeneratorConfig::default() },
        GeneratorConfig { num_categories: 0, ..GeneratorConfig::default() },
    ] {
        assert!(sample_task(&bad, 1).is_err());
    }
}

#[test]
fn move_rotate_and_stop_examples() {
    let spec = GridSpec::empty(5, 5, 1);
    let task = TaskInstance { goal: Goal::Point(Cell::new(4, 4)), start: AgentPose::new(2, 2, Heading::North), max_steps: 10 };
    let (mut s, _) = reset(spec.clone(), task.clone());
    s.step(Action::MoveAhead).unwrap();
    assert_eq!(s.pose(), AgentPose::new(2, 1, Heading::North));
    s.step(Action::RotateLeft).unwrap();
    assert_eq!(s.pose().heading, Heading::West);

    let mut spec = GridSpec::empty(5, 5, 1);
    spec.place_object(0, Cell::new(3, 2)).unwrap();
    let task = TaskInstance { goal: Goal::Object(0), start: AgentPose::new(2, 2, Heading::South), max_steps: 10 };
    let (mut s, _) = reset(spec, task);
    let r = s.step(Action::Stop).unwrap();
    assert!(r.done && r.success);
    assert!((r.reward - (10.0 - 0.01)).abs() < 1e-12);
    assert!(s.step(Action::Stop).is_err());
}

#[test]
fn reset_is_repeatable_and_centered() {
    let (spec, task) = sample_task(&cfg(TaskKind::PointNav), 3).unwrap();
    let (_, a) = reset(spec.clone(), task.clone());
    let (_, b) = reset(spec.clone(), task.clone());
    assert_eq!(a, b);
    let half = a.window / 2;
    for ch in [CH_WALL, CH_OOB] {
        assert_eq!(a.at(half, half, ch), 0.0);
    }
}

#[test]
fn pointnav_displacement_by_hand() {
    // Facing East at (1,1) on 8x8; goal (4,3) is 3 ahead and 2 to the right.
    let spec = GridSpec::empty(8, 8, 1);
    let task = TaskInstance { goal: Goal::Point(Cell::new(4, 3)), start: AgentPose::new(1, 1, Heading::East), max_steps: 20 };
    let (_, obs) = reset(spec, task);
    assert_eq!(obs.displacement, Some([2.0 / 7.0, 3.0 / 7.0]));
    // Clipped to the window: forward 3 -> row 0, right 2 -> col 4.
    assert_eq!(obs.at(0, 4, obs.channels - 1), 1.0);
}

#[test]
fn egocentric_wall_on_the_left() {
    // Facing East with a wall to the north: the wall is on the agent's left,
    // i.e. the center row, one column left of center.
    let fx = GridSpec::parse_map(".#...\n.....\n.....\n").unwrap();
    let task = TaskInstance { goal: Goal::Point(Cell::new(4, 2)), start: AgentPose::new(1, 1, Heading::East), max_steps: 20 };
    let obs = render_observation(&fx.spec, &task.start, &task, 5);
    assert_eq!(obs.at(2, 1, CH_WALL), 1.0);
    let walls: usize = (0..5).flat_map(|r| (0..5).map(move |c| (r, c))).filter(|&(r, c)| obs.at(r, c, CH_WALL) == 1.0).count();
    assert_eq!(walls, 1);
    // Two cells to the left lies north of row 0, outside the grid.
    assert_eq!(obs.at(2, 0, CH_OOB), 1.0);
}

#[test]
fn empty_room_shows_only_padding() {
    let spec = GridSpec::empty(8, 8, 2);
    let task = TaskInstance { goal: Goal::Point(Cell::new(7, 7)), start: AgentPose::new(0, 0, Heading::South), max_steps: 20 };
    let obs = render_observation(&spec, &task.start, &task, 5);
    let mut oob = 0;
    for r in 0..5 {
        for c in 0..5 {
            assert_eq!(obs.at(r, c, CH_WALL), 0.0);
            for k in 0..2 {
                assert_eq!(obs.at(r, c, 2 + k), 0.0);
            }
            oob += obs.at(r, c, CH_OOB) as usize;
        }
    }
    // At a corner, 16 of the 25 cells fall outside.
    assert_eq!(oob, 16);
}

#[test]
fn episode_never_exceeds_max_steps() {
    let (spec, task) = sample_task(&cfg(TaskKind::ObjectNav), 11).unwrap();
    let (mut s, _) = reset(spec, TaskInstance { max_steps: 5, ..task });
    let mut n = 0;
    while !s.is_done() {
        s.step(Action::RotateLeft).unwrap();
        n += 1;
    }
    assert_eq!(n, 5);
    assert!(s.step(Action::MoveAhead).is_err());
}

#[test]
fn map_round_trip() {
    for seed in 0..20 {
        let (spec, task) = sample_task(&cfg(TaskKind::PointNav), seed).unwrap();
        assert_eq!(GridSpec::parse_map(&spec.render_map(None, None)).unwrap().spec, spec);
        let Goal::Point(g) = task.goal else { unreachable!() };
        // Markers take precedence over an object drawn in the same cell.
        if spec.object_at(task.start.cell).is_some() || spec.object_at(g).is_some() {
            continue;
        }
        let fx = GridSpec::parse_map(&spec.render_map(Some(task.start.cell), Some(g))).unwrap();
        assert_eq!(fx.spec, spec);
        assert_eq!(fx.start, Some(task.start.cell));
        assert_eq!(fx.point_goal, Some(g));
    }
}

fn any_task() -> impl Strategy<Value = (GridSpec, TaskInstance)> {
    (any::<u64>(), prop::bool::ANY).prop_map(|(seed, obj)| {
        let kind = if obj { TaskKind::ObjectNav } else { TaskKind::PointNav };
        sample_task(&cfg(kind), seed).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn distance_is_symmetric_and_triangular((spec, _) in any_task(), picks in prop::collection::vec(any::<prop::sample::Index>(), 3)) {
        let free = spec.free_cells();
        let [a, b, c] = [0, 1, 2].map(|i| free[picks[i].index(free.len())]);
        let d = |x, y| shortest_path_length(&spec, x, y);
        prop_assert_eq!(d(a, b), d(b, a));
        prop_assert_eq!(d(a, b), bfs(&spec, a, b));
        if let (Some(ab), Some(bc), Some(ac)) = (d(a, b), d(b, c), d(a, c)) {
            prop_assert!(ac <= ab + bc);
        }
    }

    #[test]
    fn moves_never_enter_walls((spec, task) in any_task(), actions in prop::collection::vec(0usize..3, 1..60)) {
        let (mut s, _) = reset(spec.clone(), task);
        for a in actions {
            if s.is_done() {
                break;
            }
            let before = s.pose();
            let r = s.step(Action::try_from(a).unwrap()).unwrap();
            let p = s.pose();
            prop_assert!(spec.is_free(p.cell));
            prop_assert!(p.cell.manhattan(before.cell) <= 1);
            prop_assert!(s.steps() <= s.task().max_steps);
            prop_assert!(r.reward.is_finite());
        }
    }

    #[test]
    fn transitions_are_pure((spec, task) in any_task(), actions in prop::collection::vec(0usize..4, 1..40)) {
        let run = || {
            let (mut s, _) = reset(spec.clone(), task.clone());
            let mut out = Vec::new();
            for &a in &actions {
                if s.is_done() {
                    break;
                }
                let r = s.step(Action::try_from(a).unwrap()).unwrap();
                out.push((s.pose(), r.reward, r.done, r.success, r.observation));
            }
            out
        };
        prop_assert_eq!(run(), run());
    }
}
