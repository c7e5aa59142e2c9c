//! Deterministic top-down grid-world tabletop: scene generation, orthographic
//! rendering, instruction templating, action application, and the success
//! oracle used by the benchmark harness.

use crate::error::{EngineError, Result};
use crate::grid::{rotate_crop_degrees, Grid2D};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Default grid resolution.
pub const GRID_SIZE: usize = 64;

/// Named palette color with fixed RGB values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PaletteColor {
    pub name: &'static str,
    pub rgb: [u8; 3],
}

/// The full 12-color palette. The first 8 are the default seen split and the
/// last 4 the default unseen split.
pub const PALETTE: [PaletteColor; 12] = [
    PaletteColor { name: "red", rgb: [255, 0, 0] },
    PaletteColor { name: "green", rgb: [0, 200, 0] },
    PaletteColor { name: "blue", rgb: [0, 0, 255] },
    PaletteColor { name: "yellow", rgb: [255, 255, 0] },
    PaletteColor { name: "brown", rgb: [150, 75, 0] },
    PaletteColor { name: "gray", rgb: [128, 128, 128] },
    PaletteColor { name: "cyan", rgb: [0, 255, 255] },
    PaletteColor { name: "orange", rgb: [255, 165, 0] },
    PaletteColor { name: "purple", rgb: [128, 0, 255] },
    PaletteColor { name: "pink", rgb: [255, 105, 180] },
    PaletteColor { name: "white", rgb: [255, 255, 255] },
    PaletteColor { name: "magenta", rgb: [255, 0, 128] },
];

pub fn palette_index(name: &str) -> Option<usize> {
    PALETTE.iter().position(|p| p.name == name)
}

/// Disjoint seen/unseen color name lists.
#[derive(Debug, Clone)]
pub struct ColorSplit {
    pub seen_colors: Vec<&'static str>,
    pub unseen_colors: Vec<&'static str>,
}

impl Default for ColorSplit {
    fn default() -> Self {
        ColorSplit {
            seen_colors: PALETTE[..8].iter().map(|p| p.name).collect(),
            unseen_colors: PALETTE[8..].iter().map(|p| p.name).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Seen,
    Unseen,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Seen => "seen",
            Split::Unseen => "unseen",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "seen" => Ok(Split::Seen),
            "unseen" => Ok(Split::Unseen),
            other => Err(EngineError::Param(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ObjectKind {
    Block,
    Ball,
    Bowl,
    Box,
    Zone,
}

impl ObjectKind {
    pub fn is_pickable(&self) -> bool {
        matches!(self, ObjectKind::Block | ObjectKind::Ball)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ObjectKind::Block => "block",
            ObjectKind::Ball => "ball",
            ObjectKind::Bowl => "bowl",
            ObjectKind::Box => "box",
            ObjectKind::Zone => "zone",
        }
    }

    pub fn parse(s: &str) -> Result<ObjectKind> {
        match s {
            "block" => Ok(ObjectKind::Block),
            "ball" => Ok(ObjectKind::Ball),
            "bowl" => Ok(ObjectKind::Bowl),
            "box" => Ok(ObjectKind::Box),
            "zone" => Ok(ObjectKind::Zone),
            other => Err(EngineError::Parse(format!("unknown object kind '{other}'"))),
        }
    }

    /// Canonical square footprint stencil, true = occupied.
    pub fn stencil(&self) -> Stencil {
        match self {
            ObjectKind::Block => Stencil::solid(5),
            ObjectKind::Ball => Stencil::diamond(5),
            ObjectKind::Bowl => Stencil::solid(8),
            ObjectKind::Box => Stencil::solid(10),
            ObjectKind::Zone => Stencil::solid(12),
        }
    }
}

/// Square binary footprint stencil.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stencil {
    pub side: usize,
    pub cells: Vec<bool>,
}

impl Stencil {
    pub fn solid(side: usize) -> Stencil {
        Stencil { side, cells: vec![true; side * side] }
    }

    pub fn diamond(side: usize) -> Stencil {
        let mut cells = vec![false; side * side];
        let c = (side as isize - 1) / 2;
        for r in 0..side as isize {
            for q in 0..side as isize {
                if (r - c).abs() + (q - c).abs() <= c {
                    cells[(r * side as isize + q) as usize] = true;
                }
            }
        }
        Stencil { side, cells }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> bool {
        self.cells[r * self.side + c]
    }

    pub fn area(&self) -> usize {
        self.cells.iter().filter(|b| **b).count()
    }

    /// Nearest-neighbor rotation of the stencil about its center.
    pub fn rotated(&self, degrees: f64) -> Stencil {
        let g = Grid2D::from_data(
            self.side,
            self.side,
            1,
            self.cells.iter().map(|b| if *b { 1.0 } else { 0.0 }).collect(),
        )
        .expect("square stencil");
        let r = rotate_crop_degrees(&g, degrees).expect("square stencil rotation");
        Stencil { side: self.side, cells: r.data.iter().map(|v| *v > 0.5).collect() }
    }
}

/// Integer pose: top-left anchor of the footprint stencil plus a rotation in
/// degrees applied to the stencil about its own center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub u: usize,
    pub v: usize,
    pub theta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub id: u32,
    pub kind: ObjectKind,
    pub color: &'static str,
    pub pose: Pose,
    pub footprint: Stencil,
}

impl SceneObject {
    /// Footprint cells in grid coordinates after applying theta.
    pub fn occupied_pixels(&self) -> Vec<(usize, usize)> {
        let st = if self.pose.theta.rem_euclid(360.0) == 0.0 {
            self.footprint.clone()
        } else {
            self.footprint.rotated(self.pose.theta)
        };
        let mut out = Vec::with_capacity(st.area());
        for r in 0..st.side {
            for c in 0..st.side {
                if st.at(r, c) {
                    out.push((self.pose.u + r, self.pose.v + c));
                }
            }
        }
        out
    }

    /// Centroid of the occupied pixels, rounded down.
    pub fn centroid(&self) -> (usize, usize) {
        let px = self.occupied_pixels();
        let n = px.len().max(1);
        let su: usize = px.iter().map(|p| p.0).sum();
        let sv: usize = px.iter().map(|p| p.1).sum();
        (su / n, sv / n)
    }

    fn bbox_extent(&self) -> (usize, usize, usize, usize) {
        let s = self.footprint.side;
        (self.pose.u, self.pose.v, self.pose.u + s - 1, self.pose.v + s - 1)
    }
}

/// Background color used by the renderer; black keeps the palette histogram
/// restricted to object pixels.
pub const BACKGROUND: [u8; 3] = [0, 0, 0];

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub grid_h: usize,
    pub grid_w: usize,
    pub background: [u8; 3],
    pub objects: Vec<SceneObject>,
    pub rng_seed: u64,
}

impl Scene {
    pub fn object(&self, id: u32) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.id == id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub scene: Scene,
    pub instruction: String,
    pub target_object_id: u32,
    pub goal_container_id: u32,
    pub gt_pick: (usize, usize),
    pub gt_place: (usize, usize, f64),
    pub split: Split,
}

/// Named benchmark task: counts, kinds and color policy.
#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub name: &'static str,
    pub grid_h: usize,
    pub grid_w: usize,
    pub pickable_kind: ObjectKind,
    pub container_kind: ObjectKind,
    pub n_pickables: usize,
    pub n_containers: usize,
    /// All pickables share one color (the separating-piles analog).
    pub shared_pickable_color: bool,
    /// Minimum Chebyshev gap between object bounding boxes. Large enough that
    /// the pick crop around any object contains no other object's pixels.
    pub margin: usize,
}

impl TaskSpec {
    pub fn by_name(name: &str) -> Result<TaskSpec> {
        match name {
            "put-block-in-bowl" => Ok(TaskSpec {
                name: "put-block-in-bowl",
                grid_h: GRID_SIZE,
                grid_w: GRID_SIZE,
                pickable_kind: ObjectKind::Block,
                container_kind: ObjectKind::Bowl,
                n_pickables: 2,
                n_containers: 2,
                shared_pickable_color: false,
                margin: 8,
            }),
            "pack-block-in-box" => Ok(TaskSpec {
                name: "pack-block-in-box",
                grid_h: GRID_SIZE,
                grid_w: GRID_SIZE,
                pickable_kind: ObjectKind::Block,
                container_kind: ObjectKind::Box,
                n_pickables: 2,
                n_containers: 2,
                shared_pickable_color: false,
                margin: 8,
            }),
            "separating-piles" => Ok(TaskSpec {
                name: "separating-piles",
                grid_h: GRID_SIZE,
                grid_w: GRID_SIZE,
                pickable_kind: ObjectKind::Block,
                container_kind: ObjectKind::Zone,
                n_pickables: 3,
                n_containers: 1,
                shared_pickable_color: true,
                margin: 8,
            }),
            other => Err(EngineError::Param(format!(
                "unknown task '{other}' (known: put-block-in-bowl, pack-block-in-box, separating-piles)"
            ))),
        }
    }

    pub fn all_names() -> [&'static str; 3] {
        ["put-block-in-bowl", "pack-block-in-box", "separating-piles"]
    }
}

fn mix_seed(task: &str, split: Split, seed: u64) -> u64 {
    // splitmix64 over a stable fingerprint of (task, split, seed)
    let mut z = seed ^ 0x9e37_79b9_7f4a_7c15;
    for b in task.bytes() {
        z = (z ^ b as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z ^= z >> 27;
    }
    z ^= match split {
        Split::Seen => 0x1234_5678,
        Split::Unseen => 0x8765_4321,
    };
    z = z.wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn boxes_clear((a0, b0, a1, b1): (usize, usize, usize, usize), other: &SceneObject, margin: usize) -> bool {
    let (c0, d0, c1, d1) = other.bbox_extent();
    let row_gap: isize = if a1 < c0 {
        (c0 - a1 - 1) as isize
    } else if c1 < a0 {
        (a0 - c1 - 1) as isize
    } else {
        -1
    };
    let col_gap: isize = if b1 < d0 {
        (d0 - b1 - 1) as isize
    } else if d1 < b0 {
        (b0 - d1 - 1) as isize
    } else {
        -1
    };
    row_gap.max(col_gap) >= margin as isize
}

/// Deterministic scene generation via rejection sampling.
pub fn generate_scene(task: &TaskSpec, split: Split, seed: u64) -> Result<Scene> {
    let colors = ColorSplit::default();
    let pool: &[&'static str] = match split {
        Split::Seen => &colors.seen_colors,
        Split::Unseen => &colors.unseen_colors,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(task.name, split, seed));

    // Colors first: containers then pickables, all distinct except a shared
    // pickable color when the task asks for one.
    let distinct_needed = task.n_containers + if task.shared_pickable_color { 1 } else { task.n_pickables };
    if distinct_needed > pool.len() {
        return Err(EngineError::Generation(format!(
            "task {} needs {} distinct colors but the {} palette has {}",
            task.name,
            distinct_needed,
            split.as_str(),
            pool.len()
        )));
    }
    let mut remaining: Vec<&'static str> = pool.to_vec();
    let draw = |rng: &mut ChaCha8Rng, remaining: &mut Vec<&'static str>| {
        let i = rng.gen_range(0..remaining.len());
        remaining.swap_remove(i)
    };
    let container_colors: Vec<&'static str> =
        (0..task.n_containers).map(|_| draw(&mut rng, &mut remaining)).collect();
    let pickable_colors: Vec<&'static str> = if task.shared_pickable_color {
        let c = draw(&mut rng, &mut remaining);
        vec![c; task.n_pickables]
    } else {
        (0..task.n_pickables).map(|_| draw(&mut rng, &mut remaining)).collect()
    };

    let mut objects: Vec<SceneObject> = Vec::new();
    let mut id = 1u32;
    let mut attempts = 0usize;
    let kinds: Vec<(ObjectKind, &'static str)> = container_colors
        .iter()
        .map(|c| (task.container_kind, *c))
        .chain(pickable_colors.iter().map(|c| (task.pickable_kind, *c)))
        .collect();
    for (kind, color) in kinds {
        let st = kind.stencil();
        let side = st.side;
        loop {
            attempts += 1;
            if attempts > 1000 {
                return Err(EngineError::Generation(format!(
                    "placement infeasible after 1000 attempts (task {}, seed {seed})",
                    task.name
                )));
            }
            let u = rng.gen_range(0..=task.grid_h - side);
            let v = rng.gen_range(0..=task.grid_w - side);
            let bbox = (u, v, u + side - 1, v + side - 1);
            if objects.iter().all(|o| boxes_clear(bbox, o, task.margin)) {
                objects.push(SceneObject {
                    id,
                    kind,
                    color,
                    pose: Pose { u, v, theta: 0.0 },
                    footprint: st,
                });
                id += 1;
                break;
            }
        }
    }
    Ok(Scene {
        grid_h: task.grid_h,
        grid_w: task.grid_w,
        background: BACKGROUND,
        objects,
        rng_seed: seed,
    })
}

/// Orthographic 3-channel render; containers drawn first, pickables on top.
/// Values are palette RGB scaled to [0, 1].
pub fn render(scene: &Scene) -> Grid2D {
    let mut out = Grid2D::zeros(scene.grid_h, scene.grid_w, 3);
    let bg = scene.background;
    for p in out.data.chunks_exact_mut(3) {
        p[0] = bg[0] as f64 / 255.0;
        p[1] = bg[1] as f64 / 255.0;
        p[2] = bg[2] as f64 / 255.0;
    }
    let paint = |o: &SceneObject, out: &mut Grid2D| {
        let idx = palette_index(o.color).expect("palette color");
        let rgb = PALETTE[idx].rgb;
        for (r, c) in o.occupied_pixels() {
            if r < scene.grid_h && c < scene.grid_w {
                out.set(r, c, 0, rgb[0] as f64 / 255.0);
                out.set(r, c, 1, rgb[1] as f64 / 255.0);
                out.set(r, c, 2, rgb[2] as f64 / 255.0);
            }
        }
    };
    for o in scene.objects.iter().filter(|o| !o.kind.is_pickable()) {
        paint(o, &mut out);
    }
    for o in scene.objects.iter().filter(|o| o.kind.is_pickable()) {
        paint(o, &mut out);
    }
    out
}

fn plural(kind: ObjectKind) -> &'static str {
    match kind {
        ObjectKind::Block => "blocks",
        ObjectKind::Ball => "balls",
        ObjectKind::Bowl => "bowls",
        ObjectKind::Box => "boxes",
        ObjectKind::Zone => "zones",
    }
}

pub fn instruction_for(task: &TaskSpec, target: &SceneObject, goal: &SceneObject) -> String {
    match task.name {
        "pack-block-in-box" => format!(
            "pack the {} {} in the {} {}",
            target.color,
            target.kind.as_str(),
            goal.color,
            goal.kind.as_str()
        ),
        "separating-piles" => format!(
            "push the {} {} into the {} {}",
            target.color,
            plural(target.kind),
            goal.color,
            goal.kind.as_str()
        ),
        _ => format!(
            "put the {} {} in a {} {}",
            target.color,
            target.kind.as_str(),
            goal.color,
            goal.kind.as_str()
        ),
    }
}

/// Generates a scene plus instruction and ground-truth pick/place action.
pub fn make_episode(task: &TaskSpec, split: Split, seed: u64) -> Result<Episode> {
    let scene = generate_scene(task, split, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(task.name, split, seed) ^ 0xE715_0DE5);
    let pickables: Vec<&SceneObject> = scene.objects.iter().filter(|o| o.kind.is_pickable()).collect();
    let containers: Vec<&SceneObject> = scene.objects.iter().filter(|o| !o.kind.is_pickable()).collect();
    // For a shared-color pile the target is the row-major-first block so the
    // greedy tie rule of the policy lines up with the ground truth.
    let target = if task.shared_pickable_color {
        *pickables
            .iter()
            .min_by_key(|o| (o.pose.u, o.pose.v))
            .expect("pickables present")
    } else {
        pickables[rng.gen_range(0..pickables.len())]
    };
    let goal = containers[rng.gen_range(0..containers.len())];
    let gt_pick = target.centroid();
    let (gu, gv) = goal.centroid();
    let episode = Episode {
        instruction: instruction_for(task, target, goal),
        target_object_id: target.id,
        goal_container_id: goal.id,
        gt_pick,
        gt_place: (gu, gv, 0.0),
        split,
        scene,
    };
    Ok(episode)
}

/// Applies a pick/place action. Picking empty space is a legal no-op.
pub fn apply_action(scene: &Scene, pick: (usize, usize), place: (usize, usize, f64)) -> Scene {
    let mut out = scene.clone();
    let hit = out
        .objects
        .iter()
        .position(|o| o.kind.is_pickable() && o.occupied_pixels().contains(&pick));
    if let Some(i) = hit {
        let side = out.objects[i].footprint.side;
        let u = place.0.min(scene.grid_h.saturating_sub(side));
        let v = place.1.min(scene.grid_w.saturating_sub(side));
        out.objects[i].pose = Pose {
            u,
            v,
            theta: (out.objects[i].pose.theta + place.2).rem_euclid(360.0),
        };
    }
    out
}

/// Fraction of the target object's footprint inside the goal container's region.
pub fn containment_fraction(scene: &Scene, episode: &Episode) -> f64 {
    let target = match scene.object(episode.target_object_id) {
        Some(t) => t,
        None => return 0.0,
    };
    let goal = match scene.object(episode.goal_container_id) {
        Some(g) => g,
        None => return 0.0,
    };
    let region: std::collections::HashSet<(usize, usize)> =
        goal.occupied_pixels().into_iter().collect();
    let px = target.occupied_pixels();
    if px.is_empty() {
        return 0.0;
    }
    let inside = px.iter().filter(|p| region.contains(p)).count();
    inside as f64 / px.len() as f64
}

/// Success threshold: at least 95% of the target footprint inside the region.
pub const SUCCESS_THRESHOLD: f64 = 0.95;

pub fn check_success(scene: &Scene, episode: &Episode) -> bool {
    containment_fraction(scene, episode) >= SUCCESS_THRESHOLD
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let task = TaskSpec::by_name("put-block-in-bowl").unwrap();
        let a = generate_scene(&task, Split::Seen, 42).unwrap();
        let b = generate_scene(&task, Split::Seen, 42).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&task, Split::Seen, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn seen_split_uses_seen_colors_only() {
        let task = TaskSpec::by_name("put-block-in-bowl").unwrap();
        let split = ColorSplit::default();
        for seed in 0..50 {
            let s = generate_scene(&task, Split::Seen, seed).unwrap();
            for o in &s.objects {
                assert!(split.seen_colors.contains(&o.color), "{} not seen", o.color);
            }
        }
    }

    #[test]
    fn no_footprint_overlaps_over_many_seeds() {
        for name in TaskSpec::all_names() {
            let task = TaskSpec::by_name(name).unwrap();
            for seed in 0..200 {
                let s = generate_scene(&task, Split::Seen, seed).unwrap();
                let mut seen = std::collections::HashSet::new();
                for o in &s.objects {
                    for p in o.occupied_pixels() {
                        assert!(seen.insert(p), "overlap in task {name} seed {seed}");
                    }
                }
            }
        }
    }

    #[test]
    fn render_empty_scene_is_background() {
        let s = Scene {
            grid_h: 8,
            grid_w: 8,
            background: BACKGROUND,
            objects: vec![],
            rng_seed: 0,
        };
        let g = render(&s);
        assert!(g.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn render_block_footprint_exact() {
        let s = Scene {
            grid_h: 32,
            grid_w: 32,
            background: BACKGROUND,
            objects: vec![SceneObject {
                id: 1,
                kind: ObjectKind::Block,
                color: "red",
                pose: Pose { u: 10, v: 10, theta: 0.0 },
                footprint: Stencil::solid(4),
            }],
            rng_seed: 0,
        };
        let g = render(&s);
        let mut count = 0;
        for r in 0..32 {
            for c in 0..32 {
                if g.get(r, c, 0) > 0.0 {
                    count += 1;
                    assert!((10..=13).contains(&r) && (10..=13).contains(&c));
                    assert_eq!(g.get(r, c, 0), 1.0);
                }
            }
        }
        assert_eq!(count, 16);
    }

    #[test]
    fn pickable_occludes_container() {
        let s = Scene {
            grid_h: 32,
            grid_w: 32,
            background: BACKGROUND,
            objects: vec![
                SceneObject {
                    id: 2,
                    kind: ObjectKind::Block,
                    color: "red",
                    pose: Pose { u: 6, v: 6, theta: 0.0 },
                    footprint: Stencil::solid(5),
                },
                SceneObject {
                    id: 1,
                    kind: ObjectKind::Bowl,
                    color: "cyan",
                    pose: Pose { u: 4, v: 4, theta: 0.0 },
                    footprint: Stencil::solid(8),
                },
            ],
            rng_seed: 0,
        };
        let g = render(&s);
        // block pixel wins over bowl pixel
        assert_eq!(g.get(7, 7, 0), 1.0);
        assert_eq!(g.get(7, 7, 1), 0.0);
        // uncovered bowl pixel keeps bowl color
        assert_eq!(g.get(4, 4, 1), 1.0);
    }

    #[test]
    fn episode_instruction_and_gt_containment() {
        let task = TaskSpec::by_name("put-block-in-bowl").unwrap();
        for seed in 0..200 {
            let ep = make_episode(&task, Split::Seen, seed).unwrap();
            let target = ep.scene.object(ep.target_object_id).unwrap();
            let goal = ep.scene.object(ep.goal_container_id).unwrap();
            assert_eq!(
                ep.instruction,
                format!("put the {} block in a {} bowl", target.color, goal.color)
            );
            assert!(target.occupied_pixels().contains(&ep.gt_pick));
            assert!(goal.occupied_pixels().contains(&(ep.gt_place.0, ep.gt_place.1)));
        }
    }

    #[test]
    fn unseen_split_instruction_avoids_seen_colors() {
        let task = TaskSpec::by_name("put-block-in-bowl").unwrap();
        let split = ColorSplit::default();
        for seed in 0..50 {
            let ep = make_episode(&task, Split::Unseen, seed).unwrap();
            for seen in &split.seen_colors {
                assert!(!ep.instruction.contains(seen));
            }
        }
    }

    #[test]
    fn apply_action_background_noop() {
        let task = TaskSpec::by_name("put-block-in-bowl").unwrap();
        let s = generate_scene(&task, Split::Seen, 5).unwrap();
        let obs = render(&s);
        // find a background pixel
        let mut bgp = None;
        'outer: for r in 0..s.grid_h {
            for c in 0..s.grid_w {
                if obs.get(r, c, 0) == 0.0 && obs.get(r, c, 1) == 0.0 && obs.get(r, c, 2) == 0.0 {
                    bgp = Some((r, c));
                    break 'outer;
                }
            }
        }
        let after = apply_action(&s, bgp.unwrap(), (3, 3, 0.0));
        assert_eq!(after, s);
    }

    #[test]
    fn ground_truth_action_always_succeeds() {
        for name in TaskSpec::all_names() {
            let task = TaskSpec::by_name(name).unwrap();
            for split in [Split::Seen, Split::Unseen] {
                for seed in 0..100 {
                    let ep = make_episode(&task, split, seed).unwrap();
                    let after = apply_action(&ep.scene, ep.gt_pick, ep.gt_place);
                    assert!(check_success(&after, &ep), "task {name} seed {seed}");
                }
            }
        }
    }

    #[test]
    fn rotated_footprint_matches_rotation_oracle() {
        // L-shaped stencil rotated 90 degrees equals the index permutation.
        let mut cells = vec![false; 25];
        for r in 0..5 {
            cells[r * 5] = true;
        }
        for c in 0..3 {
            cells[4 * 5 + c] = true;
        }
        let st = Stencil { side: 5, cells };
        let rot = st.rotated(90.0);
        for r in 0..5 {
            for c in 0..5 {
                assert_eq!(rot.at(r, c), st.at(c, 4 - r));
            }
        }
    }

    #[test]
    fn half_overlap_is_failure() {
        let mut ep = {
            let task = TaskSpec::by_name("put-block-in-bowl").unwrap();
            make_episode(&task, Split::Seen, 1).unwrap()
        };
        let goal = ep.scene.object(ep.goal_container_id).unwrap().clone();
        // park the target so that roughly half its 5x5 footprint overlaps
        let ti = ep
            .scene
            .objects
            .iter()
            .position(|o| o.id == ep.target_object_id)
            .unwrap();
        ep.scene.objects[ti].pose = Pose { u: goal.pose.u, v: goal.pose.v + 5, theta: 0.0 };
        let frac = containment_fraction(&ep.scene, &ep);
        assert!(frac > 0.0 && frac < SUCCESS_THRESHOLD);
        assert!(!check_success(&ep.scene, &ep));
    }

    #[test]
    fn render_is_pure() {
        let task = TaskSpec::by_name("separating-piles").unwrap();
        let s = generate_scene(&task, Split::Unseen, 9).unwrap();
        assert_eq!(render(&s).data, render(&s).data);
    }
}
