//! Procedural crossroad scenes: pedestrians walk on two crossing road strips;
//! vehicles crossing the scene and pairs of fighting people are anomalies.
//!
//! Randomness comes from ChaCha8 seeded with `seed`, with one stream per
//! agent script (stream = script index), so adding an agent never perturbs
//! the motion of the agents listed before it.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::frames::{Frame, FrameSequence, LabelSeries, RawFrame};

pub const DEFAULT_CANVAS: usize = 256;
pub const DEFAULT_ROAD_WIDTH: usize = 32;
pub const TRAINING_FRAMES: usize = 210;
pub const TEST_FRAMES: usize = 1242;
pub const PEDESTRIAN_SPEED: f64 = 2.0;
pub const MAX_HESITATION: usize = 10;
pub const FIGHTER_JITTER: f64 = 2.0;

const FIELD_COLOR: [u8; 3] = [62, 104, 58];
const ROAD_COLOR: [u8; 3] = [118, 118, 118];

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("training scenario contains an anomalous {0:?} agent")]
    AnomalyInTraining(AgentKind),
    #[error("test scenario has no anomalous agent episode")]
    NoAnomaly,
    #[error("agent {index} ({kind:?}) ends at frame {end} but the scenario has {duration} frames")]
    EpisodeOverflow {
        index: usize,
        kind: AgentKind,
        end: usize,
        duration: usize,
    },
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Debug, thiserror::Error)]
pub enum ToyError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Ingest(#[from] crate::frames::IngestError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AgentKind {
    Pedestrian,
    Vehicle,
    FighterPair,
}

impl AgentKind {
    pub fn is_anomalous(self) -> bool {
        self != AgentKind::Pedestrian
    }

    pub fn name(self) -> &'static str {
        match self {
            AgentKind::Pedestrian => "pedestrian",
            AgentKind::Vehicle => "vehicle",
            AgentKind::FighterPair => "fighter_pair",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathPolicy {
    RandomTurnAtCrossroad,
    StraightTransit,
    StationaryJitter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Heading {
    North,
    South,
    East,
    West,
}

impl Heading {
    pub const ALL: [Heading; 4] = [Heading::North, Heading::South, Heading::East, Heading::West];

    fn unit(self) -> (f64, f64) {
        match self {
            Heading::North => (0.0, -1.0),
            Heading::South => (0.0, 1.0),
            Heading::East => (1.0, 0.0),
            Heading::West => (-1.0, 0.0),
        }
    }

    fn is_horizontal(self) -> bool {
        matches!(self, Heading::East | Heading::West)
    }

    pub fn name(self) -> &'static str {
        match self {
            Heading::North => "north",
            Heading::South => "south",
            Heading::East => "east",
            Heading::West => "west",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentSpec {
    pub kind: AgentKind,
    /// Sprite `(length, breadth)`; length runs along the direction of travel.
    pub size: (usize, usize),
    pub speed: f64,
    pub color: [u8; 3],
    pub path_policy: PathPolicy,
}

impl AgentSpec {
    pub fn pedestrian() -> Self {
        Self {
            kind: AgentKind::Pedestrian,
            size: (8, 8),
            speed: PEDESTRIAN_SPEED,
            color: [222, 190, 40],
            path_policy: PathPolicy::RandomTurnAtCrossroad,
        }
    }

    pub fn vehicle() -> Self {
        Self {
            kind: AgentKind::Vehicle,
            size: (40, 20),
            speed: 3.0 * PEDESTRIAN_SPEED,
            color: [190, 30, 30],
            path_policy: PathPolicy::StraightTransit,
        }
    }

    /// Each fighter sprite is `size`; the second one uses `color` inverted.
    pub fn fighter_pair() -> Self {
        Self {
            kind: AgentKind::FighterPair,
            size: (8, 8),
            speed: 0.0,
            color: [40, 60, 220],
            path_policy: PathPolicy::StationaryJitter,
        }
    }

    fn area(&self) -> usize {
        self.size.0 * self.size.1
    }
}

/// One agent's script in a scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentScript {
    pub spec: AgentSpec,
    /// First frame on which the agent acts.
    pub start: usize,
    /// Active frames for stationary agents; transit agents leave when they exit the canvas.
    pub duration: Option<usize>,
    /// Travel direction for transit agents; spawn road end for walkers.
    pub heading: Heading,
    /// Centre of a stationary agent.
    pub anchor: Option<(f64, f64)>,
}

impl AgentScript {
    pub fn walker(spec: AgentSpec, heading: Heading) -> Self {
        Self {
            spec,
            start: 0,
            duration: None,
            heading,
            anchor: None,
        }
    }

    pub fn transit(spec: AgentSpec, start: usize, heading: Heading) -> Self {
        Self {
            spec,
            start,
            duration: None,
            heading,
            anchor: None,
        }
    }

    pub fn stationary(spec: AgentSpec, start: usize, duration: usize, anchor: (f64, f64)) -> Self {
        Self {
            spec,
            start,
            duration: Some(duration),
            heading: Heading::East,
            anchor: Some(anchor),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyScenario {
    pub canvas_size: usize,
    /// Width of each of the two road strips crossing at the canvas centre.
    pub road_width: usize,
    pub agents: Vec<AgentScript>,
    pub duration: usize,
    pub seed: u64,
    /// Walkers pause a uniform `0..=max_hesitation` frames at the crossroad.
    pub max_hesitation: usize,
}

impl ToyScenario {
    /// One pedestrian, no anomalies, 210 frames.
    pub fn default_training(seed: u64) -> Self {
        Self {
            canvas_size: DEFAULT_CANVAS,
            road_width: DEFAULT_ROAD_WIDTH,
            agents: vec![AgentScript::walker(AgentSpec::pedestrian(), Heading::East)],
            duration: TRAINING_FRAMES,
            seed,
            max_hesitation: MAX_HESITATION,
        }
    }

    /// One pedestrian throughout plus scripted vehicle and fight episodes, 1242 frames.
    pub fn default_test(seed: u64) -> Self {
        let c = DEFAULT_CANVAS as f64 / 2.0;
        let v = AgentSpec::vehicle();
        let f = AgentSpec::fighter_pair();
        let agents = vec![
            AgentScript::walker(AgentSpec::pedestrian(), Heading::South),
            AgentScript::transit(v, 90, Heading::East),
            AgentScript::stationary(f, 260, 60, (56.0, c)),
            AgentScript::transit(v, 420, Heading::South),
            AgentScript::stationary(f, 580, 70, (c, 200.0)),
            AgentScript::transit(v, 760, Heading::West),
            AgentScript::transit(v, 910, Heading::North),
            AgentScript::stationary(f, 1040, 60, (196.0, c)),
            AgentScript::transit(v, 1160, Heading::East),
        ];
        Self {
            canvas_size: DEFAULT_CANVAS,
            road_width: DEFAULT_ROAD_WIDTH,
            agents,
            duration: TEST_FRAMES,
            seed,
            max_hesitation: MAX_HESITATION,
        }
    }

    fn centre(&self) -> f64 {
        self.canvas_size as f64 / 2.0
    }

    fn road_span(&self) -> (f64, f64) {
        let half = self.road_width as f64 / 2.0;
        (self.centre() - half, self.centre() + half)
    }

    /// Whether a point lies on either road strip.
    pub fn on_road(&self, x: f64, y: f64) -> bool {
        let (lo, hi) = self.road_span();
        let inside = |v: f64| (0.0..self.canvas_size as f64).contains(&v);
        inside(x) && inside(y) && ((lo..=hi).contains(&x) || (lo..=hi).contains(&y))
    }

    /// Inclusive frame span during which script `index` is on the canvas.
    /// Sets the length, dropping scripted episodes that no longer end inside it.
    pub fn with_duration(mut self, duration: usize) -> Self {
        self.duration = duration;
        let keep: Vec<bool> = (0..self.agents.len())
            .map(|i| self.agents[i].spec.path_policy == PathPolicy::RandomTurnAtCrossroad || self.active_span(i).1 < duration)
            .collect();
        let mut k = keep.into_iter();
        self.agents.retain(|_| k.next().unwrap());
        self
    }

    pub fn active_span(&self, index: usize) -> (usize, usize) {
        let a = &self.agents[index];
        match a.spec.path_policy {
            PathPolicy::RandomTurnAtCrossroad => (a.start, self.duration.saturating_sub(1).max(a.start)),
            PathPolicy::StationaryJitter => (a.start, a.start + a.duration.unwrap_or(1).max(1) - 1),
            PathPolicy::StraightTransit => {
                // front edge enters at t = start; the sprite covers a pixel centre
                // until its trailing edge passes canvas - 0.5
                let len = a.spec.size.0 as f64;
                let frames = ((self.canvas_size as f64 + len - 0.5) / a.spec.speed - 0.5).floor();
                (a.start, a.start + frames.max(0.0) as usize)
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.duration == 0 {
            return invalid("duration must be positive".into());
        }
        if self.canvas_size < 16 || self.road_width == 0 || self.road_width >= self.canvas_size {
            return invalid(format!("canvas {} with road width {}", self.canvas_size, self.road_width));
        }
        let walkers: Vec<&AgentScript> = self.agents.iter().filter(|a| a.spec.kind == AgentKind::Pedestrian).collect();
        for (i, a) in self.agents.iter().enumerate() {
            let expected = match a.spec.kind {
                AgentKind::Pedestrian => PathPolicy::RandomTurnAtCrossroad,
                AgentKind::Vehicle => PathPolicy::StraightTransit,
                AgentKind::FighterPair => PathPolicy::StationaryJitter,
            };
            if a.spec.path_policy != expected {
                return invalid(format!("agent {i}: {:?} must use {expected:?}", a.spec.kind));
            }
            if !(a.spec.speed.is_finite() && a.spec.speed >= 0.0) || a.spec.size.0 == 0 || a.spec.size.1 == 0 {
                return invalid(format!("agent {i}: bad size or speed"));
            }
            if a.spec.kind.is_anomalous() {
                for w in &walkers {
                    if a.spec.area() <= w.spec.area() && a.spec.kind == AgentKind::Vehicle {
                        return invalid(format!("agent {i}: vehicle must be larger than pedestrians"));
                    }
                    if a.spec.kind == AgentKind::Vehicle && a.spec.speed <= w.spec.speed {
                        return invalid(format!("agent {i}: vehicle must be faster than pedestrians"));
                    }
                }
            }
            match a.spec.path_policy {
                PathPolicy::StationaryJitter => {
                    let Some((x, y)) = a.anchor else {
                        return invalid(format!("agent {i}: stationary agent needs an anchor"));
                    };
                    if !self.on_road(x, y) {
                        return invalid(format!("agent {i}: anchor ({x}, {y}) is off the road"));
                    }
                    if a.duration.unwrap_or(0) == 0 {
                        return invalid(format!("agent {i}: stationary agent needs a positive duration"));
                    }
                }
                PathPolicy::StraightTransit if a.spec.speed <= 0.5 => {
                    return invalid(format!("agent {i}: transit speed must exceed half a pixel per frame"));
                }
                _ => {}
            }
            let (_, end) = self.active_span(i);
            if a.spec.kind.is_anomalous() && end >= self.duration {
                return Err(ConfigError::EpisodeOverflow {
                    index: i,
                    kind: a.spec.kind,
                    end,
                    duration: self.duration,
                });
            }
        }
        Ok(())
    }

    /// Flat `key=value` description of the scenario, one agent per line.
    pub fn manifest(&self) -> String {
        let mut s = String::new();
        writeln!(s, "seed={}", self.seed).unwrap();
        writeln!(s, "rng=chacha8 stream_per_agent").unwrap();
        writeln!(s, "canvas_size={}", self.canvas_size).unwrap();
        writeln!(s, "road_width={}", self.road_width).unwrap();
        writeln!(s, "duration={}", self.duration).unwrap();
        writeln!(s, "max_hesitation={}", self.max_hesitation).unwrap();
        for (i, a) in self.agents.iter().enumerate() {
            let (start, end) = self.active_span(i);
            let anchor = a.anchor.map_or("none".to_string(), |(x, y)| format!("{x}:{y}"));
            writeln!(
                s,
                "agent.{i}=kind:{} size:{}x{} speed:{} color:{},{},{} heading:{} anchor:{} frames:{}-{}",
                a.spec.kind.name(),
                a.spec.size.0,
                a.spec.size.1,
                a.spec.speed,
                a.spec.color[0],
                a.spec.color[1],
                a.spec.color[2],
                a.heading.name(),
                anchor,
                start,
                end
            )
            .unwrap();
        }
        s
    }
}

/// Axis-aligned sprite footprint; covers pixel `(col, row)` iff the pixel
/// centre `(col + 0.5, row + 0.5)` lies in `[x0, x0 + w) x [y0, y0 + h)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sprite {
    pub script: usize,
    /// Distinguishes successive walkers spawned by the same script.
    pub instance: u32,
    pub kind: AgentKind,
    pub x0: f64,
    pub y0: f64,
    pub w: f64,
    pub h: f64,
    pub color: [u8; 3],
}

impl Sprite {
    fn centred(script: usize, instance: u32, kind: AgentKind, cx: f64, cy: f64, w: f64, h: f64, color: [u8; 3]) -> Self {
        Self {
            script,
            instance,
            kind,
            x0: cx - w / 2.0,
            y0: cy - h / 2.0,
            w,
            h,
            color,
        }
    }

    pub fn centre(&self) -> (f64, f64) {
        (self.x0 + self.w / 2.0, self.y0 + self.h / 2.0)
    }

    /// Half-open pixel index range `[lo, hi)` covered along one axis.
    fn pixel_range(start: f64, len: f64, limit: usize) -> (usize, usize) {
        let lo = (start - 0.5).ceil().max(0.0);
        let hi = (start + len - 0.5).ceil().clamp(0.0, limit as f64);
        (lo.min(limit as f64) as usize, hi as usize)
    }

    /// Covered pixel rectangle `(col_lo, col_hi, row_lo, row_hi)`, clipped to the canvas.
    pub fn coverage(&self, canvas: usize) -> (usize, usize, usize, usize) {
        let (c0, c1) = Self::pixel_range(self.x0, self.w, canvas);
        let (r0, r1) = Self::pixel_range(self.y0, self.h, canvas);
        (c0, c1, r0, r1)
    }

    pub fn visible(&self, canvas: usize) -> bool {
        let (c0, c1, r0, r1) = self.coverage(canvas);
        c0 < c1 && r0 < r1
    }
}

/// Everything visible at one instant, in painter's order.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub canvas_size: usize,
    pub road_width: usize,
    pub frame: usize,
    pub sprites: Vec<Sprite>,
}

impl WorldState {
    pub fn empty(canvas_size: usize, road_width: usize) -> Self {
        Self {
            canvas_size,
            road_width,
            frame: 0,
            sprites: Vec::new(),
        }
    }

    pub fn has_anomaly(&self) -> bool {
        self.sprites.iter().any(|s| s.kind.is_anomalous() && s.visible(self.canvas_size))
    }
}

/// Rasterizes road cross over field, then sprites in list order.
pub fn render_scene(state: &WorldState) -> RawFrame {
    let n = state.canvas_size;
    let half = state.road_width as f64 / 2.0;
    let centre = n as f64 / 2.0;
    let on_strip = |i: usize| {
        let c = i as f64 + 0.5;
        c >= centre - half && c < centre + half
    };
    let mut pixels = vec![0u8; n * n * 3];
    for row in 0..n {
        for col in 0..n {
            let color = if on_strip(row) || on_strip(col) { ROAD_COLOR } else { FIELD_COLOR };
            pixels[(row * n + col) * 3..][..3].copy_from_slice(&color);
        }
    }
    for s in &state.sprites {
        let (c0, c1, r0, r1) = s.coverage(n);
        for row in r0..r1 {
            for col in c0..c1 {
                pixels[(row * n + col) * 3..][..3].copy_from_slice(&s.color);
            }
        }
    }
    RawFrame {
        pixels,
        height: n,
        width: n,
        channels: 3,
        source_path: PathBuf::new(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum WalkPhase {
    Inbound,
    Paused(usize),
    Outbound,
}

#[derive(Debug, Clone)]
struct Walker {
    instance: u32,
    x: f64,
    y: f64,
    heading: Heading,
    phase: WalkPhase,
}

/// Frame-by-frame simulation of a scenario.
pub struct Simulation<'a> {
    scenario: &'a ToyScenario,
    rngs: Vec<ChaCha8Rng>,
    walkers: Vec<Option<Walker>>,
    frame: usize,
}

impl<'a> Simulation<'a> {
    pub fn new(scenario: &'a ToyScenario) -> Self {
        let rngs = (0..scenario.agents.len())
            .map(|i| {
                let mut r = ChaCha8Rng::seed_from_u64(scenario.seed);
                r.set_stream(i as u64);
                r
            })
            .collect();
        Self {
            scenario,
            rngs,
            walkers: vec![None; scenario.agents.len()],
            frame: 0,
        }
    }

    /// Walker entering from the far end of `heading`'s road, walking inward.
    fn spawn(&self, index: usize, heading: Heading, instance: u32) -> Walker {
        let s = self.scenario;
        let c = s.centre();
        let half = s.agents[index].spec.size.0 as f64 / 2.0;
        let far = s.canvas_size as f64 - half;
        let (x, y) = match heading {
            Heading::East => (half, c),
            Heading::West => (far, c),
            Heading::South => (c, half),
            Heading::North => (c, far),
        };
        Walker {
            instance,
            x,
            y,
            heading,
            phase: WalkPhase::Inbound,
        }
    }

    fn step_walker(&mut self, index: usize) {
        let spec = self.scenario.agents[index].spec;
        let c = self.scenario.centre();
        let canvas = self.scenario.canvas_size as f64;
        let max_pause = self.scenario.max_hesitation;
        let mut w = self.walkers[index].take().expect("walker exists");
        let (dx, dy) = w.heading.unit();
        match w.phase {
            WalkPhase::Inbound => {
                let remaining = if w.heading.is_horizontal() { (c - w.x) * dx } else { (c - w.y) * dy };
                if remaining <= spec.speed && spec.speed > 0.0 {
                    w.x = c;
                    w.y = c;
                    w.phase = WalkPhase::Paused(self.rngs[index].random_range(0..=max_pause));
                } else {
                    w.x += dx * spec.speed;
                    w.y += dy * spec.speed;
                }
            }
            WalkPhase::Paused(n) if n > 0 => w.phase = WalkPhase::Paused(n - 1),
            WalkPhase::Paused(_) | WalkPhase::Outbound => {
                if w.phase != WalkPhase::Outbound {
                    w.heading = Heading::ALL[self.rngs[index].random_range(0..4)];
                    w.phase = WalkPhase::Outbound;
                }
                let (dx, dy) = w.heading.unit();
                w.x += dx * spec.speed;
                w.y += dy * spec.speed;
                let half = spec.size.0 as f64 / 2.0;
                let gone = w.x + half <= 0.0 || w.y + half <= 0.0 || w.x - half >= canvas || w.y - half >= canvas;
                if gone {
                    let end = Heading::ALL[self.rngs[index].random_range(0..4)];
                    w = self.spawn(index, end, w.instance + 1);
                }
            }
        }
        self.walkers[index] = Some(w);
    }

    /// Advances to the next frame and returns the state to render.
    pub fn next_state(&mut self) -> WorldState {
        let t = self.frame;
        let s = self.scenario;
        let mut sprites = Vec::new();
        for i in 0..s.agents.len() {
            let a = &s.agents[i];
            let (start, end) = s.active_span(i);
            if t < start || t > end {
                continue;
            }
            let (len, breadth) = (a.spec.size.0 as f64, a.spec.size.1 as f64);
            match a.spec.path_policy {
                PathPolicy::RandomTurnAtCrossroad => {
                    if self.walkers[i].is_none() {
                        self.walkers[i] = Some(self.spawn(i, a.heading, 0));
                    } else {
                        self.step_walker(i);
                    }
                    let w = self.walkers[i].as_ref().unwrap();
                    sprites.push(Sprite::centred(i, w.instance, a.spec.kind, w.x, w.y, len, breadth, a.spec.color));
                }
                PathPolicy::StraightTransit => {
                    let travelled = a.spec.speed * ((t - start) as f64 + 0.5);
                    let n = s.canvas_size as f64;
                    let c = s.centre();
                    let (x0, y0, w, h) = match a.heading {
                        Heading::East => (travelled - len, c - breadth / 2.0, len, breadth),
                        Heading::West => (n - travelled, c - breadth / 2.0, len, breadth),
                        Heading::South => (c - breadth / 2.0, travelled - len, breadth, len),
                        Heading::North => (c - breadth / 2.0, n - travelled, breadth, len),
                    };
                    sprites.push(Sprite {
                        script: i,
                        instance: 0,
                        kind: a.spec.kind,
                        x0,
                        y0,
                        w,
                        h,
                        color: a.spec.color,
                    });
                }
                PathPolicy::StationaryJitter => {
                    let (ax, ay) = a.anchor.expect("validated");
                    let rng = &mut self.rngs[i];
                    let mut jitter = || rng.random_range(-FIGHTER_JITTER..=FIGHTER_JITTER);
                    let (j1, j2, j3, j4) = (jitter(), jitter(), jitter(), jitter());
                    // sprites overlap by a quarter of their width before jitter
                    let offset = len * 0.375;
                    let other = [255 - a.spec.color[0], 255 - a.spec.color[1], 255 - a.spec.color[2]];
                    sprites.push(Sprite::centred(i, 0, a.spec.kind, ax - offset + j1, ay + j2, len, breadth, a.spec.color));
                    sprites.push(Sprite::centred(i, 1, a.spec.kind, ax + offset + j3, ay + j4, len, breadth, other));
                }
            }
        }
        self.frame += 1;
        WorldState {
            canvas_size: s.canvas_size,
            road_width: s.road_width,
            frame: t,
            sprites,
        }
    }
}

/// All world states of a scenario, one per frame.
pub fn simulate(scenario: &ToyScenario) -> Result<Vec<WorldState>, ConfigError> {
    scenario.validate()?;
    let mut sim = Simulation::new(scenario);
    Ok((0..scenario.duration).map(|_| sim.next_state()).collect())
}

fn to_sequence(states: &[WorldState], video_id: &str) -> FrameSequence {
    FrameSequence {
        video_id: video_id.to_string(),
        frames: states.iter().map(|s| Frame::from_raw(&render_scene(s), None)).collect(),
    }
}

/// Rendered raw frames of a pedestrian-only scenario.
pub fn render_training(scenario: &ToyScenario) -> Result<Vec<RawFrame>, ConfigError> {
    if let Some(a) = scenario.agents.iter().find(|a| a.spec.kind.is_anomalous()) {
        return Err(ConfigError::AnomalyInTraining(a.spec.kind));
    }
    Ok(simulate(scenario)?.iter().map(render_scene).collect())
}

/// Rendered raw frames and per-frame labels of a scenario with anomalies.
pub fn render_test(scenario: &ToyScenario) -> Result<(Vec<RawFrame>, Vec<u8>), ConfigError> {
    if !scenario.agents.iter().any(|a| a.spec.kind.is_anomalous()) {
        return Err(ConfigError::NoAnomaly);
    }
    let states = simulate(scenario)?;
    let labels = states.iter().map(|s| s.has_anomaly() as u8).collect();
    Ok((states.iter().map(render_scene).collect(), labels))
}

pub fn generate_training_set(scenario: &ToyScenario) -> Result<FrameSequence, ConfigError> {
    if let Some(a) = scenario.agents.iter().find(|a| a.spec.kind.is_anomalous()) {
        return Err(ConfigError::AnomalyInTraining(a.spec.kind));
    }
    Ok(to_sequence(&simulate(scenario)?, "01"))
}

pub fn generate_test_set(scenario: &ToyScenario) -> Result<(FrameSequence, LabelSeries), ConfigError> {
    if !scenario.agents.iter().any(|a| a.spec.kind.is_anomalous()) {
        return Err(ConfigError::NoAnomaly);
    }
    let states = simulate(scenario)?;
    let labels = LabelSeries {
        video_id: "01".into(),
        labels: states.iter().map(|s| s.has_anomaly() as u8).collect(),
    };
    Ok((to_sequence(&states, "01"), labels))
}

/// Writes `<root>/training/01/*.png`, `<root>/testing/01/*.png`,
/// `<root>/labels/01.txt` and `<root>/scenario.txt`.
pub fn write_dataset(root: &Path, train: &ToyScenario, test: &ToyScenario) -> Result<(), ToyError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ToyError::Io { path, source }
    };
    let train_frames = render_training(train)?;
    let (test_frames, labels) = render_test(test)?;
    for (split, frames) in [("training", &train_frames), ("testing", &test_frames)] {
        let dir = root.join(split).join("01");
        fs::create_dir_all(&dir).map_err(io(&dir))?;
        for (i, f) in frames.iter().enumerate() {
            f.save_png(&dir.join(format!("{i:04}.png")))?;
        }
    }
    let label_dir = root.join("labels");
    fs::create_dir_all(&label_dir).map_err(io(&label_dir))?;
    let series = LabelSeries {
        video_id: "01".into(),
        labels,
    };
    let label_path = label_dir.join("01.txt");
    fs::write(&label_path, series.to_text()).map_err(io(&label_path))?;
    let manifest = format!("[training]\n{}\n[testing]\n{}", train.manifest(), test.manifest());
    let manifest_path = root.join("scenario.txt");
    fs::write(&manifest_path, manifest).map_err(io(&manifest_path))?;
    Ok(())
}
