//! Deterministic synthetic multi-view driving world.
//!
//! Episodes carry ego kinematics driven by a scripted event list, per-view
//! latent observations that are a fixed smooth function of ego state, and
//! BEV latents. Frames are a fixed linear isometric lift of the latents, so
//! encode/decode are exact inverses on-range and round trips are auditable
//! to float precision.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Mat;

pub const CONTROL_HZ: usize = 4;
pub const CONTROL_DT: f64 = 0.25;

/// Seed of the fixed world "physics" (scene maps, codec); independent of
/// episode seeds so every episode shares the same dynamics.
const WORLD_PHYSICS_SEED: u64 = 0x5157_3_D01;
const CODEC_SEED: u64 = 0xC0DE_C5EED;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    Brake,
    Swerve,
    Cruise,
    Turn,
}

impl EventKind {
    /// Which acceleration channels the event writes (x, y).
    fn channels(self) -> (bool, bool) {
        match self {
            EventKind::Brake => (true, false),
            EventKind::Swerve => (false, true),
            EventKind::Cruise => (true, true),
            EventKind::Turn => (true, true),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub start_s: f64,
    pub duration_s: f64,
    pub kind: EventKind,
    pub magnitude: f64,
}

impl Event {
    /// Half-open control-step span of the event.
    pub fn step_span(&self, hz: usize) -> (usize, usize) {
        let start = (self.start_s * hz as f64).round() as usize;
        let end = ((self.start_s + self.duration_s) * hz as f64).round() as usize;
        (start, end)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub n_views: usize,
    pub latent_dim: usize,
    pub frame_dim: usize,
    pub episode_len_s: usize,
    pub control_hz: usize,
    pub event_script: Vec<Event>,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_views: 3,
            latent_dim: 16,
            frame_dim: 64,
            episode_len_s: 60,
            control_hz: CONTROL_HZ,
            event_script: Vec::new(),
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_views == 0 {
            return Err(Error::config("n_views must be >= 1"));
        }
        if self.latent_dim == 0 || self.frame_dim < self.latent_dim {
            return Err(Error::config(format!(
                "need frame_dim >= latent_dim >= 1, got D={} d={}",
                self.frame_dim, self.latent_dim
            )));
        }
        if self.episode_len_s == 0 {
            return Err(Error::config("episode_len_s must be >= 1"));
        }
        if self.control_hz != CONTROL_HZ {
            return Err(Error::config(format!(
                "control cadence is fixed at {CONTROL_HZ} Hz, got {}",
                self.control_hz
            )));
        }
        let len = self.episode_len_s as f64;
        for (i, e) in self.event_script.iter().enumerate() {
            if e.start_s < 0.0 || e.duration_s <= 0.0 || e.start_s + e.duration_s > len {
                return Err(Error::config(format!(
                    "event {i} ({:?}) lies outside the episode [0, {len}] s",
                    e.kind
                )));
            }
        }
        // Overlapping events that write the same acceleration channel are
        // contradictory.
        for i in 0..self.event_script.len() {
            for j in i + 1..self.event_script.len() {
                let a = &self.event_script[i];
                let b = &self.event_script[j];
                let overlap = a.start_s < b.start_s + b.duration_s
                    && b.start_s < a.start_s + a.duration_s;
                if overlap {
                    let (ax, ay) = a.kind.channels();
                    let (bx, by) = b.kind.channels();
                    if (ax && bx) || (ay && by) {
                        return Err(Error::config(format!(
                            "events {i} ({:?}) and {j} ({:?}) overlap on a shared channel",
                            a.kind, b.kind
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Number of control steps, covering both endpoints of the episode.
    pub fn n_steps(&self) -> usize {
        self.episode_len_s * self.control_hz + 1
    }
}

/// Fixed linear lift from latent space to "frame" space: `decode(z) = M z`
/// with orthonormal columns, `encode = M^T`, so `encode . decode = id`.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedCodec {
    /// frame_dim x latent_dim, orthonormal columns.
    m: Mat<f64>,
}

impl FixedCodec {
    pub fn new(latent_dim: usize, frame_dim: usize) -> Result<FixedCodec> {
        if frame_dim < latent_dim || latent_dim == 0 {
            return Err(Error::config(format!(
                "codec needs frame_dim >= latent_dim >= 1, got D={frame_dim} d={latent_dim}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(CODEC_SEED ^ ((latent_dim as u64) << 32 | frame_dim as u64));
        // Gram-Schmidt over Gaussian columns.
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(latent_dim);
        for _ in 0..latent_dim {
            loop {
                let mut c: Vec<f64> = (0..frame_dim).map(|_| gaussian(&mut rng)).collect();
                for prev in &cols {
                    let proj: f64 = c.iter().zip(prev).map(|(a, b)| a * b).sum();
                    for (x, p) in c.iter_mut().zip(prev) {
                        *x -= proj * p;
                    }
                }
                let norm: f64 = c.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-6 {
                    for x in &mut c {
                        *x /= norm;
                    }
                    cols.push(c);
                    break;
                }
            }
        }
        let mut m = Mat::zeros(frame_dim, latent_dim);
        for (j, col) in cols.iter().enumerate() {
            for (i, &v) in col.iter().enumerate() {
                m.set(i, j, v);
            }
        }
        Ok(FixedCodec { m })
    }

    pub fn latent_dim(&self) -> usize {
        self.m.cols()
    }

    pub fn frame_dim(&self) -> usize {
        self.m.rows()
    }

    /// `M z`: lift a latent to frame space.
    pub fn decode(&self, z: &[f64]) -> Vec<f64> {
        assert_eq!(z.len(), self.m.cols());
        let mut out = vec![0.0; self.m.rows()];
        for i in 0..self.m.rows() {
            let row = self.m.row(i);
            out[i] = row.iter().zip(z).map(|(a, b)| a * b).sum();
        }
        out
    }

    /// `M^T f`: exact left inverse of `decode` on its range.
    pub fn encode(&self, frame: &[f64]) -> Vec<f64> {
        assert_eq!(frame.len(), self.m.rows());
        let mut out = vec![0.0; self.m.cols()];
        for (i, f) in frame.iter().enumerate() {
            let row = self.m.row(i);
            for (o, &mv) in out.iter_mut().zip(row) {
                *o += mv * f;
            }
        }
        out
    }

    /// Worst deviation of `M^T M` from the identity.
    pub fn gram_defect(&self) -> f64 {
        let d = self.m.cols();
        let mut worst = 0.0f64;
        for a in 0..d {
            for b in 0..d {
                let mut dot = 0.0;
                for i in 0..self.m.rows() {
                    dot += self.m.get(i, a) * self.m.get(i, b);
                }
                let expect = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((dot - expect).abs());
            }
        }
        worst
    }
}

/// Fixed maps from the ego-state feature vector to scene/view/BEV latents.
struct SceneMaps {
    /// latent_dim x N_FEATURES
    w_scene: Mat<f64>,
    b_scene: Vec<f64>,
    /// per view: latent_dim x latent_dim
    view_mix: Vec<Mat<f64>>,
    bev_mix: Mat<f64>,
}

const N_FEATURES: usize = 18;

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream simple and
    // deterministic.
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

impl SceneMaps {
    fn new(latent_dim: usize, n_views: usize) -> SceneMaps {
        let mut rng = ChaCha8Rng::seed_from_u64(WORLD_PHYSICS_SEED);
        let feat_scale = 1.5 / (N_FEATURES as f64).sqrt();
        let mut w_scene = Mat::zeros(latent_dim, N_FEATURES);
        for v in w_scene.data_mut() {
            *v = gaussian(&mut rng) * feat_scale;
        }
        let b_scene = (0..latent_dim).map(|_| gaussian(&mut rng) * 0.1).collect();
        let mix_scale = 1.0 / (latent_dim as f64).sqrt();
        let mut view_mix = Vec::with_capacity(n_views);
        for _ in 0..n_views {
            let mut m = Mat::zeros(latent_dim, latent_dim);
            for v in m.data_mut() {
                *v = gaussian(&mut rng) * mix_scale;
            }
            view_mix.push(m);
        }
        let mut bev_mix = Mat::zeros(latent_dim, latent_dim);
        for v in bev_mix.data_mut() {
            *v = gaussian(&mut rng) * mix_scale;
        }
        SceneMaps {
            w_scene,
            b_scene,
            view_mix,
            bev_mix,
        }
    }
}

/// One generated episode. Accelerations are exact second differences of the
/// positions at the control cadence; frames are the codec lift of the
/// latents.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub config: WorldConfig,
    pub seed: u64,
    /// (x, y) per control step, meters.
    pub positions: Vec<(f64, f64)>,
    /// Forward-difference velocity (p[t+1] - p[t]) / dt, per step.
    pub velocities: Vec<(f64, f64)>,
    pub a_x: Vec<f64>,
    pub a_y: Vec<f64>,
    /// [step][view][latent_dim]
    pub obs_latents: Vec<Vec<Vec<f64>>>,
    /// [step][view][frame_dim]
    pub frames: Vec<Vec<Vec<f64>>>,
    /// [step][latent_dim]
    pub bev_latents: Vec<Vec<f64>>,
    codec: FixedCodec,
}

impl Episode {
    pub fn n_steps(&self) -> usize {
        self.positions.len()
    }

    pub fn codec(&self) -> &FixedCodec {
        &self.codec
    }

    pub fn time_of_step(&self, step: usize) -> f64 {
        step as f64 * CONTROL_DT
    }
}

/// Deterministic episode generation. The seed varies initial speed and the
/// scene phases; the scripted events shape the accelerations; the scene
/// maps and codec are fixed world constants.
pub fn generate_episode(seed: u64, cfg: &WorldConfig) -> Result<Episode> {
    cfg.validate()?;
    let t_len = cfg.n_steps();
    let hz = cfg.control_hz;
    let dt = 1.0 / hz as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v0 = rng.random_range(8.0..14.0);
    let slow_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let landmark_phase = rng.random_range(0.0..std::f64::consts::TAU);

    // Acceleration series from the script.
    let mut a_x = vec![0.0; t_len];
    let mut a_y = vec![0.0; t_len];
    let mut turn_rate = vec![0.0; t_len];
    for e in &cfg.event_script {
        let (start, end) = e.step_span(hz);
        let end = end.min(t_len);
        match e.kind {
            EventKind::Brake => {
                for t in start..end {
                    a_x[t] = -e.magnitude;
                }
            }
            EventKind::Swerve => {
                for (i, t) in (start..end).enumerate() {
                    // Alternate sign every two steps.
                    let sign = if (i / 2) % 2 == 0 { 1.0 } else { -1.0 };
                    a_y[t] = sign * e.magnitude;
                }
            }
            EventKind::Cruise => {
                for t in start..end {
                    a_x[t] = 0.0;
                    a_y[t] = 0.0;
                }
            }
            EventKind::Turn => {
                for t in start..end {
                    turn_rate[t] = e.magnitude;
                }
            }
        }
    }

    // Scene precursors: each event casts an observable ramp into the
    // latents up to 4 s before its onset (the analog of brake lights and
    // traffic context), holding at 1 while the event runs. One channel per
    // acceleration axis.
    let ramp_steps = 4 * hz;
    let mut approach_x = vec![0.0f64; t_len];
    let mut approach_y = vec![0.0f64; t_len];
    // Per-kind oscillatory signatures over event progress: detail-rich
    // appearance changes that take many looks to learn.
    let mut sig = vec![[0.0f64; 4]; t_len];
    for e in &cfg.event_script {
        let (start, end) = e.step_span(hz);
        let end = end.min(t_len);
        let (cx, cy) = e.kind.channels();
        for t in start.saturating_sub(ramp_steps)..end {
            let level = if t >= start {
                1.0
            } else {
                1.0 - (start - t) as f64 / ramp_steps as f64
            };
            if cx {
                approach_x[t] = approach_x[t].max(level);
            }
            if cy {
                approach_y[t] = approach_y[t].max(level);
            }
        }
        let kind_phase = match e.kind {
            EventKind::Brake => 0.0,
            EventKind::Swerve => std::f64::consts::TAU / 3.0,
            EventKind::Turn => 2.0 * std::f64::consts::TAU / 3.0,
            EventKind::Cruise => continue,
        };
        let amp = e.magnitude / 1.5;
        const SIG_FREQS: [f64; 4] = [1.0, 1.5, 2.0, 3.0];
        for t in start..end {
            let u = (t - start) as f64 / (end - start).max(1) as f64;
            for (c, f) in SIG_FREQS.iter().enumerate() {
                sig[t][c] = amp * (std::f64::consts::TAU * f * u + kind_phase * (c + 1) as f64).sin();
            }
        }
    }

    // Kinematics: u(t) = u(t-1) + a(t) dt and p(t) = p(t-1) + u(t-1) dt,
    // which makes the interior second differences of p reproduce a exactly.
    let mut positions = vec![(0.0, 0.0); t_len];
    let mut velocities = vec![(v0, 0.0); t_len];
    for t in 1..t_len {
        let (ux, uy) = velocities[t - 1];
        if turn_rate[t] != 0.0 {
            let ang = turn_rate[t] * dt;
            let (s, c) = ang.sin_cos();
            let rx = c * ux - s * uy;
            let ry = s * ux + c * uy;
            a_x[t] = (rx - ux) / dt;
            a_y[t] = (ry - uy) / dt;
        }
        velocities[t] = (ux + a_x[t] * dt, uy + a_y[t] * dt);
        let (px, py) = positions[t - 1];
        positions[t] = (px + ux * dt, py + uy * dt);
    }

    // Scene features -> latents.
    let maps = SceneMaps::new(cfg.latent_dim, cfg.n_views);
    let codec = FixedCodec::new(cfg.latent_dim, cfg.frame_dim)?;
    let mut obs_latents = Vec::with_capacity(t_len);
    let mut frames = Vec::with_capacity(t_len);
    let mut bev_latents = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let (vx, vy) = velocities[t];
        let (px, _) = positions[t];
        let window = t.saturating_sub(7)..=t;
        let n_win = window.clone().count() as f64;
        let rx: f64 = a_x[window.clone()].iter().sum::<f64>() / n_win;
        let ry: f64 = a_y[window].iter().sum::<f64>() / n_win;
        let theta = std::f64::consts::TAU * t as f64 / 32.0 + slow_phase;
        let land = std::f64::consts::TAU * px / 40.0 + landmark_phase;
        let features = [
            vx / 10.0,
            vy / 5.0,
            a_x[t] / 3.0,
            a_y[t] / 3.0,
            theta.sin(),
            theta.cos(),
            land.sin(),
            land.cos(),
            rx / 3.0,
            ry / 3.0,
            (vx - v0) / 5.0,
            approach_x[t],
            approach_y[t],
            sig[t][0],
            sig[t][1],
            sig[t][2],
            sig[t][3],
            1.0,
        ];
        let mut scene = vec![0.0; cfg.latent_dim];
        for (i, s) in scene.iter_mut().enumerate() {
            let row = maps.w_scene.row(i);
            let pre: f64 = row.iter().zip(&features).map(|(w, f)| w * f).sum();
            *s = (pre + maps.b_scene[i]).tanh();
        }
        let mut views = Vec::with_capacity(cfg.n_views);
        let mut view_frames = Vec::with_capacity(cfg.n_views);
        for v in 0..cfg.n_views {
            let mix = &maps.view_mix[v];
            let mut z = vec![0.0; cfg.latent_dim];
            for (i, zi) in z.iter_mut().enumerate() {
                *zi = mix.row(i).iter().zip(&scene).map(|(a, b)| a * b).sum();
            }
            view_frames.push(codec.decode(&z));
            views.push(z);
        }
        let mut bev = vec![0.0; cfg.latent_dim];
        for (i, bi) in bev.iter_mut().enumerate() {
            *bi = maps.bev_mix.row(i).iter().zip(&scene).map(|(a, b)| a * b).sum();
        }
        obs_latents.push(views);
        frames.push(view_frames);
        bev_latents.push(bev);
    }

    Ok(Episode {
        config: cfg.clone(),
        seed,
        positions,
        velocities,
        a_x,
        a_y,
        obs_latents,
        frames,
        bev_latents,
        codec,
    })
}

/// Script spans in control-step units, sorted by start.
pub fn event_segments(episode: &Episode) -> Vec<(usize, usize, EventKind)> {
    let hz = episode.config.control_hz;
    let mut segs: Vec<_> = episode
        .config
        .event_script
        .iter()
        .map(|e| {
            let (s, t) = e.step_span(hz);
            (s, t.min(episode.n_steps()), e.kind)
        })
        .collect();
    segs.sort_by_key(|&(s, _, _)| s);
    segs
}

/// Deterministic event script for experiment seeds: up to `n_events` of
/// the brake/swerve/turn kinds placed in disjoint slots of the episode.
/// Few events per episode keep them rare relative to cruising, which is the
/// regime importance sampling targets.
pub fn scripted_events_n(seed: u64, episode_len_s: usize, n_events: usize) -> Vec<Event> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9).wrapping_add(17));
    let len = episode_len_s as f64;
    let n = n_events.max(1);
    let slot = (len - 10.0) / n as f64;
    let kinds = [
        (EventKind::Brake, 2.0, 2.5..3.5),
        (EventKind::Swerve, 2.0, 1.0..2.0),
        (EventKind::Turn, 2.5, 0.2..0.4),
    ];
    let mut events = Vec::new();
    // Rotate which kind comes first so single-event episodes vary by seed.
    let rot = (seed % 3) as usize;
    for i in 0..n {
        let (kind, dur, mag_range) = kinds[(i + rot) % kinds.len()].clone();
        let lo = 5.0 + slot * i as f64;
        let start = lo + rng.random_range(0.0..(slot - dur).max(0.5));
        events.push(Event {
            start_s: start,
            duration_s: dur,
            kind,
            magnitude: rng.random_range(mag_range),
        });
    }
    events
}

/// Three-event script (one of each kind).
pub fn scripted_events(seed: u64, episode_len_s: usize) -> Vec<Event> {
    scripted_events_n(seed, episode_len_s, 3)
}

// ---------------------------------------------------------------------------
// Flat binary container: JSON-free header with dims + cadence, then
// little-endian f64 arrays.
// ---------------------------------------------------------------------------

const EPISODE_MAGIC: &[u8; 4] = b"FWEP";
const EPISODE_VERSION: u32 = 1;

fn push_f64s(out: &mut Vec<u8>, xs: impl IntoIterator<Item = f64>) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format("episode container truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

pub fn episode_to_bytes(ep: &Episode) -> Vec<u8> {
    let cfg = &ep.config;
    let mut out = Vec::new();
    out.extend_from_slice(EPISODE_MAGIC);
    out.extend_from_slice(&EPISODE_VERSION.to_le_bytes());
    for v in [
        cfg.n_views as u32,
        cfg.latent_dim as u32,
        cfg.frame_dim as u32,
        cfg.episode_len_s as u32,
        cfg.control_hz as u32,
        cfg.event_script.len() as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for e in &cfg.event_script {
        out.extend_from_slice(
            &(match e.kind {
                EventKind::Brake => 0u32,
                EventKind::Swerve => 1,
                EventKind::Cruise => 2,
                EventKind::Turn => 3,
            })
            .to_le_bytes(),
        );
        push_f64s(&mut out, [e.start_s, e.duration_s, e.magnitude]);
    }
    out.extend_from_slice(&ep.seed.to_le_bytes());
    out.extend_from_slice(&(ep.n_steps() as u64).to_le_bytes());
    push_f64s(&mut out, ep.positions.iter().flat_map(|&(x, y)| [x, y]));
    push_f64s(&mut out, ep.velocities.iter().flat_map(|&(x, y)| [x, y]));
    push_f64s(&mut out, ep.a_x.iter().copied());
    push_f64s(&mut out, ep.a_y.iter().copied());
    push_f64s(
        &mut out,
        ep.obs_latents
            .iter()
            .flat_map(|views| views.iter().flat_map(|z| z.iter().copied())),
    );
    push_f64s(
        &mut out,
        ep.frames
            .iter()
            .flat_map(|views| views.iter().flat_map(|f| f.iter().copied())),
    );
    push_f64s(&mut out, ep.bev_latents.iter().flat_map(|z| z.iter().copied()));
    out
}

pub fn episode_from_bytes(bytes: &[u8]) -> Result<Episode> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != EPISODE_MAGIC {
        return Err(Error::format("not an episode container"));
    }
    let version = r.u32()?;
    if version != EPISODE_VERSION {
        return Err(Error::format(format!("unsupported episode version {version}")));
    }
    let n_views = r.u32()? as usize;
    let latent_dim = r.u32()? as usize;
    let frame_dim = r.u32()? as usize;
    let episode_len_s = r.u32()? as usize;
    let control_hz = r.u32()? as usize;
    let n_events = r.u32()? as usize;
    let mut event_script = Vec::with_capacity(n_events);
    for _ in 0..n_events {
        let kind = match r.u32()? {
            0 => EventKind::Brake,
            1 => EventKind::Swerve,
            2 => EventKind::Cruise,
            3 => EventKind::Turn,
            k => return Err(Error::format(format!("unknown event kind {k}"))),
        };
        let start_s = r.f64()?;
        let duration_s = r.f64()?;
        let magnitude = r.f64()?;
        event_script.push(Event {
            start_s,
            duration_s,
            kind,
            magnitude,
        });
    }
    let config = WorldConfig {
        n_views,
        latent_dim,
        frame_dim,
        episode_len_s,
        control_hz,
        event_script,
    };
    let seed = r.u64()?;
    let t_len = r.u64()? as usize;
    let pos_flat = r.f64s(t_len * 2)?;
    let vel_flat = r.f64s(t_len * 2)?;
    let a_x = r.f64s(t_len)?;
    let a_y = r.f64s(t_len)?;
    let mut obs_latents = Vec::with_capacity(t_len);
    for _ in 0..t_len {
        let mut views = Vec::with_capacity(n_views);
        for _ in 0..n_views {
            views.push(r.f64s(latent_dim)?);
        }
        obs_latents.push(views);
    }
    let mut frames = Vec::with_capacity(t_len);
    for _ in 0..t_len {
        let mut views = Vec::with_capacity(n_views);
        for _ in 0..n_views {
            views.push(r.f64s(frame_dim)?);
        }
        frames.push(views);
    }
    let mut bev_latents = Vec::with_capacity(t_len);
    for _ in 0..t_len {
        bev_latents.push(r.f64s(latent_dim)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::format("trailing bytes in episode container"));
    }
    Ok(Episode {
        codec: FixedCodec::new(config.latent_dim, config.frame_dim)?,
        config,
        seed,
        positions: pos_flat.chunks(2).map(|c| (c[0], c[1])).collect(),
        velocities: vel_flat.chunks(2).map(|c| (c[0], c[1])).collect(),
        a_x,
        a_y,
        obs_latents,
        frames,
        bev_latents,
    })
}

/// Step-wise kinematics summary for plotting.
pub fn episode_summary_csv(ep: &Episode) -> String {
    let segs = event_segments(ep);
    let mut out = String::from("step,time_s,x,y,vx,vy,a_x,a_y,event\n");
    for t in 0..ep.n_steps() {
        let event = segs
            .iter()
            .find(|&&(s, e, _)| t >= s && t < e)
            .map(|&(_, _, k)| format!("{k:?}"))
            .unwrap_or_default();
        let (x, y) = ep.positions[t];
        let (vx, vy) = ep.velocities[t];
        out.push_str(&format!(
            "{t},{:.3},{x:.6},{y:.6},{vx:.6},{vy:.6},{:.6},{:.6},{event}\n",
            ep.time_of_step(t),
            ep.a_x[t],
            ep.a_y[t]
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn braking_config() -> WorldConfig {
        WorldConfig {
            event_script: vec![Event {
                start_s: 10.0,
                duration_s: 0.75,
                kind: EventKind::Brake,
                magnitude: 3.0,
            }],
            episode_len_s: 30,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = braking_config();
        let a = generate_episode(9, &cfg).unwrap();
        let b = generate_episode(9, &cfg).unwrap();
        assert_eq!(a, b);
        let c = generate_episode(10, &cfg).unwrap();
        assert_ne!(a.positions, c.positions);
    }

    #[test]
    fn brake_sets_exact_acceleration_span() {
        let ep = generate_episode(1, &braking_config()).unwrap();
        for t in 0..ep.n_steps() {
            if (40..43).contains(&t) {
                assert_eq!(ep.a_x[t], -3.0);
            } else {
                assert_eq!(ep.a_x[t], 0.0, "step {t}");
            }
            assert_eq!(ep.a_y[t], 0.0);
        }
    }

    #[test]
    fn empty_script_is_constant_velocity() {
        let cfg = WorldConfig {
            episode_len_s: 10,
            ..WorldConfig::default()
        };
        let ep = generate_episode(3, &cfg).unwrap();
        assert!(ep.a_x.iter().all(|&a| a == 0.0));
        assert!(ep.a_y.iter().all(|&a| a == 0.0));
        let (vx0, vy0) = ep.velocities[0];
        for &(vx, vy) in &ep.velocities {
            assert_eq!((vx, vy), (vx0, vy0));
        }
    }

    #[test]
    fn accelerations_are_exact_second_differences() {
        let mut cfg = braking_config();
        cfg.event_script.push(Event {
            start_s: 15.0,
            duration_s: 2.0,
            kind: EventKind::Turn,
            magnitude: 0.3,
        });
        cfg.event_script.push(Event {
            start_s: 20.0,
            duration_s: 1.5,
            kind: EventKind::Swerve,
            magnitude: 1.5,
        });
        let ep = generate_episode(5, &cfg).unwrap();
        let dt = CONTROL_DT;
        for t in 1..ep.n_steps() - 1 {
            let d2x = (ep.positions[t + 1].0 - 2.0 * ep.positions[t].0 + ep.positions[t - 1].0)
                / (dt * dt);
            let d2y = (ep.positions[t + 1].1 - 2.0 * ep.positions[t].1 + ep.positions[t - 1].1)
                / (dt * dt);
            assert!((d2x - ep.a_x[t]).abs() <= 1e-9, "t={t}: {d2x} vs {}", ep.a_x[t]);
            assert!((d2y - ep.a_y[t]).abs() <= 1e-9);
        }
    }

    #[test]
    fn brake_span_peak_matches_scripted_magnitude() {
        let ep = generate_episode(2, &braking_config()).unwrap();
        let (s, e) = ep.config.event_script[0].step_span(CONTROL_HZ);
        let peak = ep.a_x[s..e].iter().map(|a| a.abs()).fold(0.0f64, f64::max);
        assert_eq!(peak, 3.0);
    }

    #[test]
    fn overlapping_same_channel_events_are_rejected() {
        let mut cfg = braking_config();
        cfg.event_script.push(Event {
            start_s: 10.5,
            duration_s: 1.0,
            kind: EventKind::Cruise,
            magnitude: 0.0,
        });
        assert!(matches!(generate_episode(1, &cfg), Err(Error::Config(_))));
        // Brake + swerve overlap on different channels is allowed.
        let cfg2 = WorldConfig {
            episode_len_s: 30,
            event_script: vec![
                Event {
                    start_s: 10.0,
                    duration_s: 1.0,
                    kind: EventKind::Brake,
                    magnitude: 2.0,
                },
                Event {
                    start_s: 10.25,
                    duration_s: 1.0,
                    kind: EventKind::Swerve,
                    magnitude: 1.0,
                },
            ],
            ..WorldConfig::default()
        };
        assert!(generate_episode(1, &cfg2).is_ok());
    }

    #[test]
    fn codec_round_trip_is_exact_on_range() {
        let codec = FixedCodec::new(16, 64).unwrap();
        assert!(codec.gram_defect() <= 1e-10);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let z: Vec<f64> = (0..16).map(|_| rng.random_range(-2.0..2.0)).collect();
            let frame = codec.decode(&z);
            // Isometry.
            let nz: f64 = z.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nf: f64 = frame.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((nz - nf).abs() <= 1e-10);
            let back = codec.encode(&frame);
            for (a, b) in z.iter().zip(&back) {
                assert!((a - b).abs() <= 1e-10);
            }
            // decode . encode is the identity on the decoder range.
            let relift = codec.decode(&back);
            for (a, b) in frame.iter().zip(&relift) {
                assert!((a - b).abs() <= 1e-10);
            }
        }
        // Zero maps to zero and encode is linear.
        assert!(codec.decode(&vec![0.0; 16]).iter().all(|&x| x == 0.0));
        let f1 = codec.decode(&(0..16).map(|i| i as f64 * 0.1).collect::<Vec<_>>());
        let f2 = codec.decode(&(0..16).map(|i| (16 - i) as f64 * 0.05).collect::<Vec<_>>());
        let sum: Vec<f64> = f1.iter().zip(&f2).map(|(a, b)| a + b).collect();
        let enc_sum = codec.encode(&sum);
        let enc_parts: Vec<f64> = codec
            .encode(&f1)
            .iter()
            .zip(&codec.encode(&f2))
            .map(|(a, b)| a + b)
            .collect();
        for (a, b) in enc_sum.iter().zip(&enc_parts) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn frames_are_the_codec_lift_of_latents() {
        let ep = generate_episode(6, &braking_config()).unwrap();
        for t in [0, 17, 100] {
            for v in 0..ep.config.n_views {
                let lifted = ep.codec().decode(&ep.obs_latents[t][v]);
                assert_eq!(lifted, ep.frames[t][v]);
            }
        }
    }

    #[test]
    fn event_segments_in_step_units() {
        let ep = generate_episode(1, &braking_config()).unwrap();
        assert_eq!(event_segments(&ep), vec![(40, 43, EventKind::Brake)]);
        let empty = generate_episode(
            1,
            &WorldConfig {
                episode_len_s: 10,
                ..WorldConfig::default()
            },
        )
        .unwrap();
        assert!(event_segments(&empty).is_empty());
    }

    #[test]
    fn scripted_events_are_valid_and_sorted() {
        for seed in 0..20 {
            let events = scripted_events(seed, 60);
            let cfg = WorldConfig {
                event_script: events.clone(),
                ..WorldConfig::default()
            };
            cfg.validate().unwrap();
            let spans: Vec<_> = events.iter().map(|e| e.step_span(4)).collect();
            for w in spans.windows(2) {
                assert!(w[0].1 <= w[1].0, "segments overlap: {spans:?}");
            }
        }
    }

    #[test]
    fn binary_container_round_trips() {
        let ep = generate_episode(11, &braking_config()).unwrap();
        let bytes = episode_to_bytes(&ep);
        let back = episode_from_bytes(&bytes).unwrap();
        assert_eq!(back, ep);
        assert!(episode_from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn summary_csv_row_count() {
        let ep = generate_episode(
            1,
            &WorldConfig {
                episode_len_s: 2,
                ..WorldConfig::default()
            },
        )
        .unwrap();
        let csv = episode_summary_csv(&ep);
        assert_eq!(csv.lines().count(), ep.n_steps() + 1);
    }
}
