//! A 2-D variable-traction world producing robot trajectories with
//! proprioceptive, visual and action channels.
//!
//! Time indexing: `observations[t]` is sensed in `states[t]`; `actions[t]` is
//! commanded after that and drives the transition to `states[t + 1]`.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffmath::Tensor;
use crate::error::{Error, Result};
use crate::model::{Action, ModalitySpec, ObservationSet};

/// Names of the simulator's sensor streams, in dataset order.
pub const LIN_VEL: &str = "lin_vel";
pub const ANG_VEL: &str = "ang_vel";
pub const ACCEL: &str = "accel";
pub const IMAGE: &str = "image";

const OUT_OF_BOUNDS_COLOR: [f64; 3] = [0.0, 0.0, 0.0];
const DATASET_SCHEMA: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TerrainClass {
    pub mu: f64,
    pub color: [f64; 3],
}

/// Simulator constants; the defaults are the desk-scale world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub world_size_m: f64,
    pub cell_size_m: f64,
    /// Mean distance between terrain-region centers.
    pub region_spacing_m: f64,
    pub classes: Vec<TerrainClass>,
    pub v_max: f64,
    pub gain_k: f64,
    pub sigma_dyn: f64,
    pub sigma_obs: f64,
    pub sigma_img: f64,
    pub dt: f64,
    pub image_size: usize,
    pub pixel_size_m: f64,
    /// Steps an action is held before being resampled.
    pub action_hold: usize,
    pub turn_std: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            world_size_m: 100.0,
            cell_size_m: 0.5,
            region_spacing_m: 3.0,
            classes: vec![
                TerrainClass { mu: 1.0, color: [0.55, 0.55, 0.55] },
                TerrainClass { mu: 0.5, color: [0.25, 0.6, 0.2] },
                TerrainClass { mu: 0.15, color: [0.85, 0.9, 1.0] },
            ],
            v_max: 2.0,
            gain_k: 10.0,
            sigma_dyn: 0.01,
            sigma_obs: 0.02,
            sigma_img: 0.02,
            dt: 0.1,
            image_size: 16,
            pixel_size_m: 0.25,
            action_hold: 10,
            turn_std: 0.3,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("simulator: {m}")));
        if !(self.world_size_m > 0.0 && self.cell_size_m > 0.0 && self.region_spacing_m > 0.0) {
            return bad("sizes must be positive");
        }
        if self.classes.is_empty() || self.classes.len() > 255 {
            return bad("need 1..=255 terrain classes");
        }
        if self.classes.iter().any(|c| !(c.mu > 0.0 && c.mu <= 1.0)) {
            return bad("friction must lie in (0, 1]");
        }
        if !(self.dt > 0.0 && self.v_max > 0.0 && self.gain_k >= 0.0) {
            return bad("dt and v_max must be positive, gain nonnegative");
        }
        if [self.sigma_dyn, self.sigma_obs, self.sigma_img, self.turn_std].iter().any(|s| !(*s >= 0.0)) {
            return bad("noise levels must be nonnegative");
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(8) || !(self.pixel_size_m > 0.0) {
            return bad("image size must be a positive multiple of 8");
        }
        if self.action_hold == 0 {
            return bad("action_hold must be at least 1");
        }
        Ok(())
    }

    /// The sensor streams a trajectory records, with default weights.
    pub fn modality_specs(&self) -> Vec<ModalitySpec> {
        vec![
            ModalitySpec::dense(LIN_VEL, 1, 1.0),
            ModalitySpec::dense(ANG_VEL, 1, 1.0),
            ModalitySpec::dense(ACCEL, 1, 1.0),
            ModalitySpec::image(IMAGE, 3, self.image_size, self.image_size, 0.05),
        ]
    }
}

/// Grid of terrain classes; cell `(i, j)` covers
/// `[i·cell, (i+1)·cell) × [j·cell, (j+1)·cell)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TerrainMap {
    pub width: usize,
    pub height: usize,
    pub cell_size: f64,
    pub classes: Vec<TerrainClass>,
    grid: Vec<u8>,
}

impl TerrainMap {
    pub fn new(width: usize, height: usize, cell_size: f64, classes: Vec<TerrainClass>, grid: Vec<u8>) -> Result<Self> {
        if grid.len() != width * height || width == 0 || height == 0 {
            return Err(Error::InvalidArgument("terrain grid must be width × height and nonempty".into()));
        }
        if grid.iter().any(|&c| c as usize >= classes.len()) {
            return Err(Error::InvalidArgument("terrain grid references an undefined class".into()));
        }
        if classes.iter().any(|c| !(c.mu > 0.0 && c.mu <= 1.0)) {
            return Err(Error::InvalidArgument("friction must lie in (0, 1]".into()));
        }
        Ok(Self { width, height, cell_size, classes, grid })
    }

    pub fn uniform(width: usize, height: usize, cell_size: f64, class: TerrainClass) -> Self {
        Self { width, height, cell_size, classes: vec![class], grid: vec![0; width * height] }
    }

    /// Voronoi regions around jittered seed points with random classes.
    pub fn generate(config: &SimConfig, rng: &mut impl Rng) -> Self {
        let n = (config.world_size_m / config.cell_size_m).round().max(1.0) as usize;
        let spacing = config.region_spacing_m;
        let seeds_per_side = (config.world_size_m / spacing).ceil() as usize + 1;
        let mut seeds = Vec::with_capacity(seeds_per_side * seeds_per_side);
        for sj in 0..seeds_per_side {
            for si in 0..seeds_per_side {
                let x = (si as f64 + rng.gen_range(0.0..1.0)) * spacing;
                let y = (sj as f64 + rng.gen_range(0.0..1.0)) * spacing;
                seeds.push((x, y, rng.gen_range(0..config.classes.len()) as u8));
            }
        }
        let mut grid = vec![0u8; n * n];
        for j in 0..n {
            for i in 0..n {
                let (x, y) = ((i as f64 + 0.5) * config.cell_size_m, (j as f64 + 0.5) * config.cell_size_m);
                let (ci, cj) = ((x / spacing) as isize, (y / spacing) as isize);
                let mut best = (f64::INFINITY, 0u8);
                for dj in -2..=2 {
                    for di in -2..=2 {
                        let (si, sj) = (ci + di, cj + dj);
                        if si < 0 || sj < 0 || si as usize >= seeds_per_side || sj as usize >= seeds_per_side {
                            continue;
                        }
                        let (sx, sy, class) = seeds[sj as usize * seeds_per_side + si as usize];
                        let d = (sx - x).powi(2) + (sy - y).powi(2);
                        if d < best.0 {
                            best = (d, class);
                        }
                    }
                }
                grid[j * n + i] = best.1;
            }
        }
        Self { width: n, height: n, cell_size: config.cell_size_m, classes: config.classes.clone(), grid }
    }

    pub fn extent(&self) -> (f64, f64) {
        (self.width as f64 * self.cell_size, self.height as f64 * self.cell_size)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (w, h) = self.extent();
        x >= 0.0 && y >= 0.0 && x < w && y < h
    }

    fn cell(&self, i: isize, j: isize) -> Option<u8> {
        if i < 0 || j < 0 || i as usize >= self.width || j as usize >= self.height {
            return None;
        }
        Some(self.grid[j as usize * self.width + i as usize])
    }

    /// Terrain class at a world point; `None` off the map.
    pub fn class_at(&self, x: f64, y: f64) -> Option<u8> {
        if !self.contains(x, y) {
            return None;
        }
        self.cell((x / self.cell_size) as isize, (y / self.cell_size) as isize)
    }

    fn color_of(&self, cell: Option<u8>) -> [f64; 3] {
        cell.map_or(OUT_OF_BOUNDS_COLOR, |c| self.classes[c as usize].color)
    }

    /// Bilinear interpolation of class colors between cell centers.
    fn sample_color(&self, x: f64, y: f64) -> [f64; 3] {
        let u = x / self.cell_size - 0.5;
        let v = y / self.cell_size - 0.5;
        let (i0, j0) = (u.floor(), v.floor());
        let (fu, fv) = (u - i0, v - j0);
        let (i0, j0) = (i0 as isize, j0 as isize);
        let corners = [
            (self.color_of(self.cell(i0, j0)), (1.0 - fu) * (1.0 - fv)),
            (self.color_of(self.cell(i0 + 1, j0)), fu * (1.0 - fv)),
            (self.color_of(self.cell(i0, j0 + 1)), (1.0 - fu) * fv),
            (self.color_of(self.cell(i0 + 1, j0 + 1)), fu * fv),
        ];
        let mut out = [0.0; 3];
        for (c, w) in corners {
            for k in 0..3 {
                out[k] += w * c[k];
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct RobotState {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub v: f64,
    pub omega: f64,
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let mut t = theta.rem_euclid(2.0 * PI);
    if t > PI {
        t -= 2.0 * PI;
    }
    t
}

/// Exact unicycle integration over `dt` at constant `(v, ω)`; the returned
/// heading is not wrapped.
pub fn advance_pose(x: f64, y: f64, theta: f64, v: f64, omega: f64, dt: f64) -> (f64, f64, f64) {
    if omega.abs() < 1e-8 {
        return (x + v * dt * theta.cos(), y + v * dt * theta.sin(), theta + omega * dt);
    }
    let t1 = theta + omega * dt;
    let r = v / omega;
    (x + r * (t1.sin() - theta.sin()), y - r * (t1.cos() - theta.cos()), t1)
}

/// First-order traction-limited velocity tracking followed by an exact arc.
/// `rng = None` disables process noise.
pub fn step_dynamics(
    state: &RobotState,
    action: Action,
    mu: f64,
    dt: f64,
    gain_k: f64,
    sigma_dyn: f64,
    rng: Option<&mut dyn rand::RngCore>,
) -> RobotState {
    let g = (gain_k * mu * dt).min(1.0);
    let (mut ev, mut ew) = (0.0, 0.0);
    if let Some(rng) = rng {
        if sigma_dyn > 0.0 {
            let n = Normal::new(0.0, sigma_dyn).expect("positive stddev");
            ev = n.sample(rng);
            ew = n.sample(rng);
        }
    }
    let v = state.v + g * (action.forward - state.v) + ev;
    let omega = state.omega + g * (action.turn - state.omega) + ew;
    let (x, y, theta) = advance_pose(state.x, state.y, state.theta, v, omega, dt);
    RobotState { x, y, theta: wrap_angle(theta), v, omega }
}

/// Ego-centric, heading-aligned `3 × size × size` view of the terrain ahead:
/// the robot sits at the bottom-center, rows run away from it. Pixel noise is
/// added when `rng` is given; values are clipped to `[0, 1]`.
pub fn render_patch(
    map: &TerrainMap,
    state: &RobotState,
    size: usize,
    pixel_size: f64,
    sigma_img: f64,
    rng: Option<&mut dyn rand::RngCore>,
) -> Vec<f32> {
    let (c, s) = (state.theta.cos(), state.theta.sin());
    let mut img = vec![0f32; 3 * size * size];
    let noise = Normal::new(0.0, sigma_img.max(f64::MIN_POSITIVE)).expect("positive stddev");
    let mut rng = rng;
    for r in 0..size {
        let ahead = (size - r) as f64 * pixel_size - 0.5 * pixel_size;
        for col in 0..size {
            let right = (col as f64 + 0.5 - size as f64 / 2.0) * pixel_size;
            let x = state.x + ahead * c + right * s;
            let y = state.y + ahead * s - right * c;
            let color = map.sample_color(x, y);
            for k in 0..3 {
                let mut value = color[k];
                if let Some(rng) = rng.as_deref_mut() {
                    if sigma_img > 0.0 {
                        value += noise.sample(rng);
                    }
                }
                img[(k * size + r) * size + col] = value.clamp(0.0, 1.0) as f32;
            }
        }
    }
    img
}

/// One recorded run. Every numeric field is f32-representable so the dataset
/// format round-trips exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    pub actions: Vec<Action>,
    pub states: Vec<RobotState>,
    pub terrain: Vec<u8>,
    /// Per modality, `len × numel` values in dataset modality order.
    pub observations: Vec<Vec<f32>>,
}

fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Observation of modality `m` at step `t`.
    pub fn observation(&self, specs: &[ModalitySpec], m: usize, t: usize) -> &[f32] {
        let n = specs[m].numel();
        &self.observations[m][t * n..(t + 1) * n]
    }

    /// All modalities at step `t`, restricted to `present`.
    pub fn observation_set(
        &self,
        specs: &[ModalitySpec],
        t: usize,
        present: crate::model::Subset,
    ) -> Result<ObservationSet<f32>> {
        let values = (0..specs.len())
            .map(|m| {
                present
                    .contains(m)
                    .then(|| Tensor::new(specs[m].shape.clone(), self.observation(specs, m, t).to_vec()).expect("shape"))
            })
            .collect();
        ObservationSet::new(specs, values)
    }

    /// Action preceding observation `t` (zero before the first step).
    pub fn prev_action(&self, t: usize) -> Action {
        if t == 0 {
            Action::default()
        } else {
            self.actions[t - 1]
        }
    }

    fn check(&self, specs: &[ModalitySpec]) -> std::result::Result<(), String> {
        let t = self.len();
        if self.states.len() != t || self.terrain.len() != t {
            return Err("field lengths differ".into());
        }
        if self.observations.len() != specs.len() {
            return Err(format!("{} observation blocks for {} modalities", self.observations.len(), specs.len()));
        }
        for (o, s) in self.observations.iter().zip(specs) {
            if o.len() != t * s.numel() {
                return Err(format!("observation `{}` has {} values, expected {}", s.name, o.len(), t * s.numel()));
            }
        }
        Ok(())
    }
}

/// Simulates `len` steps on `map`. Actions follow the exploration scheme:
/// forward target ~ N(0.5·v_max, (0.15·v_max)²) clipped to `[0, v_max]`,
/// turn target ~ N(0, turn_std²), both held for `action_hold` steps. The run
/// stops early if the robot leaves the map.
pub fn gen_trajectory(map: &TerrainMap, config: &SimConfig, len: usize, seed: u64) -> Result<Trajectory> {
    config.validate()?;
    if len < 2 {
        return Err(Error::InvalidArgument("trajectory length must be at least 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = map.extent();
    let margin = 0.25;
    let mut state = RobotState {
        x: rng.gen_range(w * margin..w * (1.0 - margin)),
        y: rng.gen_range(h * margin..h * (1.0 - margin)),
        theta: rng.gen_range(-PI..PI),
        v: 0.0,
        omega: 0.0,
    };
    let obs_noise = Normal::new(0.0, config.sigma_obs.max(f64::MIN_POSITIVE)).expect("positive stddev");
    let noise = |rng: &mut ChaCha8Rng| if config.sigma_obs > 0.0 { obs_noise.sample(rng) } else { 0.0 };
    let fwd = Normal::new(0.5 * config.v_max, 0.15 * config.v_max).expect("positive stddev");
    let turn = Normal::new(0.0, config.turn_std.max(f64::MIN_POSITIVE)).expect("positive stddev");
    let specs = config.modality_specs();
    let mut traj = Trajectory {
        dt: config.dt,
        actions: Vec::with_capacity(len),
        states: Vec::with_capacity(len),
        terrain: Vec::with_capacity(len),
        observations: vec![Vec::new(); specs.len()],
    };
    let mut action = Action::default();
    let mut prev_v = 0.0;
    for t in 0..len {
        let Some(class) = map.class_at(state.x, state.y) else { break };
        if t % config.action_hold == 0 {
            let a_v = fwd.sample(&mut rng).clamp(0.0, config.v_max);
            let a_w = if config.turn_std > 0.0 { turn.sample(&mut rng) } else { 0.0 };
            action = Action::new(f32_round(a_v), f32_round(a_w));
        }
        let recorded = RobotState {
            x: f32_round(state.x),
            y: f32_round(state.y),
            theta: f32_round(state.theta),
            v: f32_round(state.v),
            omega: f32_round(state.omega),
        };
        traj.states.push(recorded);
        traj.terrain.push(class);
        traj.actions.push(action);
        traj.observations[0].push((state.v + noise(&mut rng)) as f32);
        traj.observations[1].push((state.omega + noise(&mut rng)) as f32);
        let accel = if t == 0 { 0.0 } else { (state.v - prev_v) / config.dt };
        traj.observations[2].push((accel + noise(&mut rng)) as f32);
        let img = render_patch(map, &state, config.image_size, config.pixel_size_m, config.sigma_img, Some(&mut rng));
        traj.observations[3].extend_from_slice(&img);
        prev_v = state.v;
        let mu = map.classes[class as usize].mu;
        state = step_dynamics(&state, action, mu, config.dt, config.gain_k, config.sigma_dyn, Some(&mut rng));
    }
    if traj.len() < 2 {
        return Err(Error::InvalidArgument("robot left the map within two steps".into()));
    }
    Ok(traj)
}

/// `mask[t]` is true iff the terrain class changes at some step
/// `c ∈ [t, t + window]`, a change at `c` meaning `terrain[c] ≠ terrain[c-1]`.
pub fn label_transitions(terrain: &[u8], window: usize) -> Vec<bool> {
    let n = terrain.len();
    let change: Vec<bool> = (0..n).map(|c| c > 0 && terrain[c] != terrain[c - 1]).collect();
    (0..n).map(|t| (t..=(t + window).min(n.saturating_sub(1))).any(|c| change[c])).collect()
}

/// Dataset-level metadata stored in `meta.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub schema_version: u32,
    pub dt: f64,
    pub count: usize,
    pub modalities: Vec<ModalitySpec>,
    pub classes: Vec<TerrainClass>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn new(modalities: Vec<ModalitySpec>, dt: f64, classes: Vec<TerrainClass>, trajectories: Vec<Trajectory>) -> Self {
        let meta = DatasetMeta { schema_version: DATASET_SCHEMA, dt, count: trajectories.len(), modalities, classes };
        Self { meta, trajectories }
    }

    pub fn specs(&self) -> &[ModalitySpec] {
        &self.meta.modalities
    }

    /// Splits off the last `held_out` trajectories.
    pub fn split(mut self, held_out: usize) -> (Dataset, Dataset) {
        let cut = self.trajectories.len().saturating_sub(held_out);
        let test = self.trajectories.split_off(cut);
        let train = Dataset::new(self.meta.modalities.clone(), self.meta.dt, self.meta.classes.clone(), self.trajectories);
        let test = Dataset::new(self.meta.modalities, self.meta.dt, self.meta.classes, test);
        (train, test)
    }
}

/// Generates `count` trajectories, each on its own freshly drawn map.
pub fn generate_dataset(config: &SimConfig, count: usize, len: usize, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    let mut trajectories = Vec::with_capacity(count);
    for _ in 0..count {
        let map_seed: u64 = seeds.gen();
        let traj_seed: u64 = seeds.gen();
        let map = TerrainMap::generate(config, &mut ChaCha8Rng::seed_from_u64(map_seed));
        trajectories.push(gen_trajectory(&map, config, len, traj_seed)?);
    }
    Ok(Dataset::new(config.modality_specs(), config.dt, config.classes.clone(), trajectories))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryHeader {
    index: usize,
    length: usize,
    dt: f64,
    /// Blocks of the `.f32` file in order.
    fields: Vec<FieldEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FieldEntry {
    name: String,
    /// Values per step.
    per_step: usize,
    /// Byte offset into the `.f32` file.
    offset: usize,
    len: usize,
}

const STATE_FIELDS: [&str; 5] = ["state.x", "state.y", "state.theta", "state.v", "state.omega"];

pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let specs = dataset.specs();
    let mut meta = dataset.meta.clone();
    meta.count = dataset.trajectories.len();
    let meta_path = dir.join("meta.json");
    let json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    fs::write(&meta_path, json).map_err(|e| Error::io(&meta_path, e))?;
    for (n, traj) in dataset.trajectories.iter().enumerate() {
        traj.check(specs).map_err(|m| Error::InvalidArgument(format!("trajectory {n}: {m}")))?;
        let mut blocks: Vec<(String, usize, Vec<f32>)> = vec![
            ("action.forward".into(), 1, traj.actions.iter().map(|a| a.forward as f32).collect()),
            ("action.turn".into(), 1, traj.actions.iter().map(|a| a.turn as f32).collect()),
        ];
        let state_values: [fn(&RobotState) -> f64; 5] = [|s| s.x, |s| s.y, |s| s.theta, |s| s.v, |s| s.omega];
        for (name, get) in STATE_FIELDS.iter().zip(state_values) {
            blocks.push((name.to_string(), 1, traj.states.iter().map(|s| get(s) as f32).collect()));
        }
        blocks.push(("terrain".into(), 1, traj.terrain.iter().map(|&c| c as f32).collect()));
        for (spec, values) in specs.iter().zip(&traj.observations) {
            blocks.push((format!("obs.{}", spec.name), spec.numel(), values.clone()));
        }
        let mut fields = Vec::new();
        let mut payload = Vec::new();
        for (name, per_step, values) in blocks {
            fields.push(FieldEntry { name, per_step, offset: payload.len(), len: values.len() });
            for v in values {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = TrajectoryHeader { index: n, length: traj.len(), dt: traj.dt, fields };
        let jp = dir.join(format!("traj_{n}.json"));
        fs::write(&jp, serde_json::to_string_pretty(&header).expect("header serializes")).map_err(|e| Error::io(&jp, e))?;
        let bp = dir.join(format!("traj_{n}.f32"));
        fs::write(&bp, payload).map_err(|e| Error::io(&bp, e))?;
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join("meta.json");
    if !meta_path.exists() {
        let empty = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_none();
        if empty {
            return Err(Error::EmptyDataset(dir.display().to_string()));
        }
    }
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: DatasetMeta =
        serde_json::from_str(&text).map_err(|e| Error::format(&meta_path, format!("invalid meta: {e}")))?;
    if meta.schema_version != DATASET_SCHEMA {
        return Err(Error::format(&meta_path, format!("unsupported schema_version {}", meta.schema_version)));
    }
    if meta.count == 0 {
        return Err(Error::EmptyDataset(dir.display().to_string()));
    }
    let mut trajectories = Vec::with_capacity(meta.count);
    for n in 0..meta.count {
        trajectories.push(read_trajectory(dir, n, &meta)?);
    }
    Ok(Dataset { meta, trajectories })
}

fn read_trajectory(dir: &Path, n: usize, meta: &DatasetMeta) -> Result<Trajectory> {
    let jp = dir.join(format!("traj_{n}.json"));
    let bp = dir.join(format!("traj_{n}.f32"));
    let text = fs::read_to_string(&jp).map_err(|e| Error::io(&jp, e))?;
    let header: TrajectoryHeader =
        serde_json::from_str(&text).map_err(|e| Error::format(&jp, format!("trajectory {n}: {e}")))?;
    let bytes = fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
    let t = header.length;
    let field = |name: &str, per_step: usize| -> Result<Vec<f32>> {
        let f = header
            .fields
            .iter()
            .find(|f| f.name == name)
            .ok_or_else(|| Error::format(&jp, format!("trajectory {n}: missing field `{name}`")))?;
        if f.per_step != per_step || f.len != t * per_step {
            return Err(Error::format(&jp, format!("trajectory {n}: field `{name}` has the wrong size")));
        }
        let end = f.offset.checked_add(f.len * 4).filter(|&e| e <= bytes.len()).ok_or_else(|| {
            Error::format(&bp, format!("trajectory {n}: payload truncated in field `{name}`"))
        })?;
        Ok(bytes[f.offset..end].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    };
    let expected_bytes: usize = header.fields.iter().map(|f| f.len * 4).sum();
    if bytes.len() != expected_bytes {
        return Err(Error::format(
            &bp,
            format!("trajectory {n}: payload has {} bytes, header declares {expected_bytes}", bytes.len()),
        ));
    }
    let fw = field("action.forward", 1)?;
    let tw = field("action.turn", 1)?;
    let actions = fw.iter().zip(&tw).map(|(&f, &w)| Action::new(f as f64, w as f64)).collect();
    let cols: Vec<Vec<f32>> = STATE_FIELDS.iter().map(|name| field(name, 1)).collect::<Result<_>>()?;
    let states = (0..t)
        .map(|i| RobotState {
            x: cols[0][i] as f64,
            y: cols[1][i] as f64,
            theta: cols[2][i] as f64,
            v: cols[3][i] as f64,
            omega: cols[4][i] as f64,
        })
        .collect();
    let terrain = field("terrain", 1)?
        .iter()
        .map(|&c| {
            if c >= 0.0 && (c as usize) < meta.classes.len() && c.fract() == 0.0 {
                Ok(c as u8)
            } else {
                Err(Error::format(&bp, format!("trajectory {n}: invalid terrain class {c}")))
            }
        })
        .collect::<Result<_>>()?;
    let observations = meta
        .modalities
        .iter()
        .map(|s| field(&format!("obs.{}", s.name), s.numel()))
        .collect::<Result<Vec<_>>>()?;
    if observations.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::format(&bp, format!("trajectory {n}: non-finite observation")));
    }
    Ok(Trajectory { dt: header.dt, actions, states, terrain, observations })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn classes() -> Vec<TerrainClass> {
        SimConfig::default().classes
    }

    #[test]
    fn traction_examples() {
        let s = RobotState::default();
        let a = Action::new(1.0, 0.0);
        assert_eq!(step_dynamics(&s, a, 1.0, 0.1, 10.0, 0.0, None).v, 1.0);
        assert!((step_dynamics(&s, a, 0.1, 0.1, 10.0, 0.0, None).v - 0.1).abs() < 1e-15);
        let fixed = RobotState { v: 0.7, omega: -0.2, ..s };
        let out = step_dynamics(&fixed, Action::new(0.7, -0.2), 0.5, 0.1, 10.0, 0.0, None);
        assert_eq!((out.v, out.omega), (0.7, -0.2));
    }

    #[test]
    fn tracking_error_decays_geometrically() {
        let mut s = RobotState::default();
        let a = Action::new(1.5, 0.3);
        let g: f64 = (10.0 * 0.5 * 0.1f64).min(1.0);
        let mut err = 1.5;
        for _ in 0..20 {
            s = step_dynamics(&s, a, 0.5, 0.1, 10.0, 0.0, None);
            err *= 1.0 - g;
            assert!(((1.5 - s.v) - err).abs() < 1e-12);
        }
    }

    #[test]
    fn advance_pose_examples() {
        assert_eq!(advance_pose(1.0, 2.0, 0.3, 0.0, 0.0, 1.0), (1.0, 2.0, 0.3));
        assert_eq!(advance_pose(0.0, 0.0, 0.0, 1.0, 0.0, 1.0), (1.0, 0.0, 0.0));
        let (x, y, t) = advance_pose(0.0, 0.0, 0.0, 1.0, PI / 2.0, 1.0);
        // Fine-step Euler oracle.
        let (mut ex, mut ey, mut et) = (0.0, 0.0, 0.0);
        let n = 1_000_000;
        let h = 1.0 / n as f64;
        for _ in 0..n {
            // midpoint heading keeps the oracle second order
            let mid = et + 0.5 * PI / 2.0 * h;
            ex += h * mid.cos();
            ey += h * mid.sin();
            et += PI / 2.0 * h;
        }
        assert!((x - ex).abs() < 1e-9 && (y - ey).abs() < 1e-9 && (t - et).abs() < 1e-9);
        assert!((x - 2.0 / PI).abs() < 1e-12 && (y - 2.0 / PI).abs() < 1e-12);
    }

    #[test]
    fn wrap_angle_range() {
        for k in -20..20 {
            let t = wrap_angle(k as f64 * 0.77);
            assert!(t > -PI && t <= PI);
            let turns = (k as f64 * 0.77 - t) / (2.0 * PI);
            assert!((turns - turns.round()).abs() < 1e-9);
        }
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
    }

    #[test]
    fn uniform_map_renders_constant() {
        let map = TerrainMap::uniform(40, 40, 0.5, classes()[1].clone());
        let s = RobotState { x: 10.0, y: 10.0, theta: 0.7, ..Default::default() };
        let img = render_patch(&map, &s, 16, 0.25, 0.0, None);
        for (k, chunk) in img.chunks(256).enumerate() {
            assert!(chunk.iter().all(|&v| v == classes()[1].color[k] as f32));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noisy = render_patch(&map, &s, 16, 0.25, 0.02, Some(&mut rng));
        let mean: f64 = noisy[..256].iter().map(|&v| v as f64).sum::<f64>() / 256.0;
        assert!((mean - classes()[1].color[0]).abs() < 0.01);
        assert!(noisy.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn rendering_is_rotation_periodic_and_off_map_is_reserved() {
        let config = SimConfig::default();
        let map = TerrainMap::generate(&config, &mut ChaCha8Rng::seed_from_u64(2));
        let s = RobotState { x: 40.0, y: 60.0, theta: 1.1, ..Default::default() };
        let turned = RobotState { theta: 1.1 + 2.0 * PI, ..s };
        let a = render_patch(&map, &s, 16, 0.25, 0.0, None);
        let b = render_patch(&map, &turned, 16, 0.25, 0.0, None);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
        }
        let edge = RobotState { x: 0.5, y: 50.0, theta: PI, ..Default::default() };
        let img = render_patch(&map, &edge, 16, 0.25, 0.0, None);
        // Top row lies 3.9 m behind the map edge: out-of-bounds color.
        assert!(img[0] == 0.0 && img[256] == 0.0 && img[512] == 0.0);
    }

    #[test]
    fn boundary_row_moves_down_when_approaching() {
        // Class 0 for x < 10 m, class 2 beyond; robot drives along +x.
        let (w, h) = (60, 20);
        let grid = (0..w * h).map(|k| if (k % w) < 20 { 0 } else { 2 }).collect();
        let map = TerrainMap::new(w, h, 0.5, classes(), grid).unwrap();
        let boundary_row = |x: f64| -> Option<usize> {
            let s = RobotState { x, y: 5.0, theta: 0.0, ..Default::default() };
            let img = render_patch(&map, &s, 16, 0.25, 0.0, None);
            // First row from the bottom whose red channel is mostly class 2.
            (0..16).rev().find(|&r| img[r * 16 + 8] as f64 > 0.5 * (classes()[0].color[0] + classes()[2].color[0]))
        };
        let mut last = 0usize;
        let mut seen = false;
        for step in 0..30 {
            let x = 5.5 + 0.1 * step as f64;
            if let Some(r) = boundary_row(x) {
                if seen {
                    assert!(r >= last, "row moved up at x={x}");
                }
                seen = true;
                last = r;
            }
        }
        assert!(seen && last > 8);
    }

    #[test]
    fn trajectories_are_deterministic_and_noisy_as_declared() {
        let config = SimConfig::default();
        let map = TerrainMap::generate(&config, &mut ChaCha8Rng::seed_from_u64(3));
        let a = gen_trajectory(&map, &config, 200, 11).unwrap();
        assert_eq!(a, gen_trajectory(&map, &config, 200, 11).unwrap());
        assert_ne!(a, gen_trajectory(&map, &config, 200, 12).unwrap());
        assert_eq!(a.len(), 200);
        // Velocity noise statistics over 10^4 samples.
        let mut diffs = Vec::new();
        for seed in 0..50 {
            let t = gen_trajectory(&map, &config, 200, 100 + seed).unwrap();
            for i in 0..t.len() {
                diffs.push(t.observations[0][i] as f64 - t.states[i].v);
            }
        }
        assert!(diffs.len() >= 10_000);
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / diffs.len() as f64).sqrt();
        assert!((sd - config.sigma_obs).abs() < 0.1 * config.sigma_obs, "sd = {sd}");
        // Observation sets are fully present at generation.
        let specs = config.modality_specs();
        let o = a.observation_set(&specs, 5, crate::model::Subset::full(4)).unwrap();
        assert!(o.mask().iter().all(|&m| m));
    }

    #[test]
    fn speeds_stay_bounded() {
        let config = SimConfig::default();
        let bound = config.v_max + 5.0 * config.sigma_dyn;
        for seed in 0..20 {
            let map = TerrainMap::generate(&config, &mut ChaCha8Rng::seed_from_u64(seed));
            let t = gen_trajectory(&map, &config, 200, seed).unwrap();
            assert!(t.states.iter().all(|s| s.v.abs() <= bound));
            assert!(t.states.iter().all(|s| s.theta > -PI - 1e-6 && s.theta <= PI + 1e-6));
        }
    }

    #[test]
    fn leaving_the_map_truncates() {
        let map = TerrainMap::uniform(8, 8, 0.5, classes()[0].clone());
        let config = SimConfig { turn_std: 0.0, ..SimConfig::default() };
        let t = gen_trajectory(&map, &config, 500, 4).unwrap();
        assert!(t.len() < 500 && t.len() >= 2);
        assert!(t.states.iter().all(|s| map.contains(s.x, s.y)));
        assert!(gen_trajectory(&map, &config, 1, 4).is_err());
    }

    #[test]
    fn transition_labels() {
        assert!(label_transitions(&[1; 100], 10).iter().all(|&m| !m));
        let terrain: Vec<u8> = (0..100).map(|t| if t < 50 { 0 } else { 1 }).collect();
        let mask = label_transitions(&terrain, 10);
        assert_eq!(mask.len(), 100);
        // Brute force over the label sequence.
        for t in 0..100 {
            let expected = (t..=(t + 10).min(99)).any(|c| c > 0 && terrain[c] != terrain[c - 1]);
            assert_eq!(mask[t], expected);
            assert_eq!(mask[t], (40..=50).contains(&t));
        }
    }

    fn small_dataset() -> Dataset {
        let config = SimConfig { world_size_m: 30.0, ..SimConfig::default() };
        generate_dataset(&config, 3, 20, 9).unwrap()
    }

    #[test]
    fn dataset_round_trip() {
        let ds = small_dataset();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn empty_directory_is_an_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn corrupt_payloads_name_the_trajectory() {
        let ds = small_dataset();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let bp = dir.path().join("traj_1.f32");
        let bytes = fs::read(&bp).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let cut = rng.gen_range(0..bytes.len());
            fs::write(&bp, &bytes[..cut]).unwrap();
            let err = read_dataset(dir.path()).unwrap_err().to_string();
            assert!(err.contains("trajectory 1") && err.contains("traj_1.f32"), "{err}");
        }
        // A corrupted terrain byte is caught too.
        let mut bad = bytes.clone();
        let terrain_offset = 7 * 20 * 4;
        bad[terrain_offset..terrain_offset + 4].copy_from_slice(&7.5f32.to_le_bytes());
        fs::write(&bp, &bad).unwrap();
        assert!(read_dataset(dir.path()).unwrap_err().to_string().contains("terrain"));
        fs::write(&bp, &bytes).unwrap();
        fs::write(dir.path().join("traj_2.json"), "{\"index\": 2}").unwrap();
        assert!(read_dataset(dir.path()).unwrap_err().to_string().contains("trajectory 2"));
    }
}
