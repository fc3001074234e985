//! Deterministic 2D gated-navigation environment with a scripted two-mode
//! expert and a binary terminal outcome.
//!
//! The agent starts in a band near the bottom, the goal disc sits near the
//! top, and an axis-aligned trap rectangle blocks the middle. Entering the
//! trap (or running out the horizon) fails the episode; entering the goal
//! disc succeeds. The trap localizes failures to identifiable steps, which is
//! the property the relevance-discovery stage has to find.
//!
//! All geometry constants are fixed so golden values stay stable.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;

use crate::seeding::{self, streams};
use crate::{Error, Result};

/// Episode horizon.
pub const HORIZON: u32 = 100;
/// Goal disc center.
pub const GOAL: [f64; 2] = [0.5, 0.95];
/// Goal disc radius.
pub const GOAL_RADIUS: f64 = 0.07;
/// Trap rectangle, `[x_min, x_max, y_min, y_max]`.
pub const TRAP: [f64; 4] = [0.35, 0.65, 0.45, 0.60];
/// Per-axis action clip.
pub const ACTION_CLIP: f64 = 0.08;
/// Start band, `[x_min, x_max, y_min, y_max]`.
pub const START_BAND: [f64; 4] = [0.2, 0.8, 0.02, 0.10];
/// Observation dimensionality: agent position plus goal offset.
pub const OBS_DIM: usize = 4;
/// Action dimensionality.
pub const ACTION_DIM: usize = 2;

/// Binary terminal outcome of an episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Outcome {
    Success,
    Failure,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Outcome::Success => write!(f, "success"),
            Outcome::Failure => write!(f, "failure"),
        }
    }
}

impl std::str::FromStr for Outcome {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "success" => Ok(Outcome::Success),
            "failure" => Ok(Outcome::Failure),
            other => Err(Error::Format(format!("unknown outcome `{other}`"))),
        }
    }
}

/// Which side of the trap the scripted expert skirts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpertMode {
    Left,
    Right,
}

impl fmt::Display for ExpertMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExpertMode::Left => write!(f, "left"),
            ExpertMode::Right => write!(f, "right"),
        }
    }
}

impl std::str::FromStr for ExpertMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "left" => Ok(ExpertMode::Left),
            "right" => Ok(ExpertMode::Right),
            other => Err(Error::Format(format!("unknown expert mode `{other}`"))),
        }
    }
}

/// Environment state: agent position, timestep, and the terminal outcome once
/// the episode has ended.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pos: [f64; 2],
    timestep: u32,
    outcome: Option<Outcome>,
}

impl EnvState {
    /// State at an arbitrary position (clamped into the unit square),
    /// timestep zero. Useful for probing the expert and the policy.
    pub fn at(pos: [f64; 2]) -> Self {
        EnvState {
            pos: [pos[0].clamp(0.0, 1.0), pos[1].clamp(0.0, 1.0)],
            timestep: 0,
            outcome: None,
        }
    }

    #[inline]
    pub fn pos(&self) -> [f64; 2] {
        self.pos
    }

    #[inline]
    pub fn timestep(&self) -> u32 {
        self.timestep
    }

    #[inline]
    pub fn is_terminal(&self) -> bool {
        self.outcome.is_some()
    }

    #[inline]
    pub fn outcome(&self) -> Option<Outcome> {
        self.outcome
    }
}

/// Agent position plus goal offset, the policy's per-step input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub pos: [f64; 2],
    pub goal_offset: [f64; 2],
}

impl Observation {
    pub fn of(state: &EnvState) -> Self {
        Observation {
            pos: state.pos,
            goal_offset: [GOAL[0] - state.pos[0], GOAL[1] - state.pos[1]],
        }
    }

    pub fn to_vec(self) -> [f64; OBS_DIM] {
        [self.pos[0], self.pos[1], self.goal_offset[0], self.goal_offset[1]]
    }
}

/// A velocity command, clipped per axis to [`ACTION_CLIP`] on construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Action {
    dx: f64,
    dy: f64,
}

impl Action {
    pub fn clipped(dx: f64, dy: f64) -> Self {
        Action {
            dx: dx.clamp(-ACTION_CLIP, ACTION_CLIP),
            dy: dy.clamp(-ACTION_CLIP, ACTION_CLIP),
        }
    }

    #[inline]
    pub fn dx(&self) -> f64 {
        self.dx
    }

    #[inline]
    pub fn dy(&self) -> f64 {
        self.dy
    }
}

#[inline]
fn in_trap(pos: [f64; 2]) -> bool {
    pos[0] >= TRAP[0] && pos[0] <= TRAP[1] && pos[1] >= TRAP[2] && pos[1] <= TRAP[3]
}

#[inline]
fn in_goal(pos: [f64; 2]) -> bool {
    let dx = pos[0] - GOAL[0];
    let dy = pos[1] - GOAL[1];
    (dx * dx + dy * dy).sqrt() <= GOAL_RADIUS
}

/// Result of one environment step.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub state: EnvState,
    pub observation: Observation,
    pub terminal: bool,
    pub outcome: Option<Outcome>,
}

/// Start a new episode. The start position is sampled uniformly in the start
/// band from the seed's dedicated stream.
pub fn reset(seed: u64) -> EnvState {
    let mut rng = seeding::rng(seed, streams::ENV_RESET);
    let x = START_BAND[0] + (START_BAND[1] - START_BAND[0]) * rng.gen::<f64>();
    let y = START_BAND[2] + (START_BAND[3] - START_BAND[2]) * rng.gen::<f64>();
    EnvState {
        pos: [x, y],
        timestep: 0,
        outcome: None,
    }
}

/// Advance one step: apply the clipped action, clamp to the unit square, then
/// resolve trap entry (failure), goal entry (success), or horizon exhaustion
/// (failure), in that order.
pub fn step(state: &EnvState, action: Action) -> Result<StepResult> {
    if state.is_terminal() {
        return Err(Error::TerminalStep);
    }
    let pos = [
        (state.pos[0] + action.dx).clamp(0.0, 1.0),
        (state.pos[1] + action.dy).clamp(0.0, 1.0),
    ];
    let timestep = state.timestep + 1;
    let outcome = if in_trap(pos) {
        Some(Outcome::Failure)
    } else if in_goal(pos) {
        Some(Outcome::Success)
    } else if timestep >= HORIZON {
        Some(Outcome::Failure)
    } else {
        None
    };
    let next = EnvState {
        pos,
        timestep,
        outcome,
    };
    Ok(StepResult {
        observation: Observation::of(&next),
        terminal: outcome.is_some(),
        outcome,
        state: next,
    })
}

// Expert geometry: climb a vertical corridor well clear of the trap, then cut
// across to the goal once above the trap's top edge.
const CORRIDOR_LEFT_X: f64 = 0.18;
const CORRIDOR_RIGHT_X: f64 = 0.82;
const CORRIDOR_TOP_Y: f64 = 0.72;
const CORRIDOR_TOL: f64 = 0.03;

/// Proportional controller toward a waypoint sequence that skirts the trap on
/// the chosen side, then heads for the goal. The two modes give the
/// demonstration set a genuinely multi-modal action distribution.
pub fn scripted_expert(state: &EnvState, mode: ExpertMode) -> Action {
    let [x, y] = state.pos;
    let target = if y > TRAP[3] {
        GOAL
    } else {
        let side_x = match mode {
            ExpertMode::Left => CORRIDOR_LEFT_X,
            ExpertMode::Right => CORRIDOR_RIGHT_X,
        };
        if (x - side_x).abs() > CORRIDOR_TOL {
            // Slide into the corridor at the current height first.
            [side_x, y]
        } else {
            [side_x, CORRIDOR_TOP_Y]
        }
    };
    Action::clipped(target[0] - x, target[1] - y)
}

/// One (observation, action) pair of a demonstration.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoStep {
    pub observation: Observation,
    pub action: Action,
}

/// A full expert episode: seed, mode, per-step pairs, and the outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoEpisode {
    pub seed: u64,
    pub mode: ExpertMode,
    pub steps: Vec<DemoStep>,
    pub outcome: Outcome,
}

/// Roll the scripted expert from a seeded start to termination.
pub fn run_expert_episode(seed: u64, mode: ExpertMode) -> DemoEpisode {
    let mut state = reset(seed);
    let mut steps = Vec::new();
    let outcome = loop {
        let observation = Observation::of(&state);
        let action = scripted_expert(&state, mode);
        steps.push(DemoStep {
            observation,
            action,
        });
        let res = step(&state, action).expect("expert never steps a terminal state");
        state = res.state;
        if let Some(outcome) = res.outcome {
            break outcome;
        }
    };
    DemoEpisode {
        seed,
        mode,
        steps,
        outcome,
    }
}

/// Generate a balanced demonstration set: episode `i` uses a seed derived from
/// `(base_seed, i)` and alternates between the two expert modes.
pub fn generate_demos(count: usize, base_seed: u64) -> Vec<DemoEpisode> {
    (0..count)
        .map(|i| {
            let seed = seeding::derive_seed2(base_seed, streams::DEMO, i as u64);
            let mode = if i % 2 == 0 {
                ExpertMode::Left
            } else {
                ExpertMode::Right
            };
            run_expert_episode(seed, mode)
        })
        .collect()
}

const DEMO_HEADER: &str = "ppguide-demos v1";

/// Write demonstrations as newline-delimited records, one full episode per
/// line, after a schema-versioned header line. Floats use shortest
/// round-trip formatting, so reload is bit-exact.
pub fn save_demos<W: Write>(w: &mut W, demos: &[DemoEpisode]) -> Result<()> {
    writeln!(w, "{DEMO_HEADER}")?;
    for d in demos {
        write!(w, "{} {} {} {}", d.seed, d.mode, d.outcome, d.steps.len())?;
        for s in &d.steps {
            let o = s.observation.to_vec();
            write!(
                w,
                " {} {} {} {} {} {}",
                o[0],
                o[1],
                o[2],
                o[3],
                s.action.dx(),
                s.action.dy()
            )?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Read a demonstration file written by [`save_demos`].
pub fn load_demos<R: BufRead>(r: &mut R) -> Result<Vec<DemoEpisode>> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty demo file".into()))??;
    if header != DEMO_HEADER {
        return Err(Error::Format(format!("unexpected demo header `{header}`")));
    }
    let mut demos = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut tok = line.split_whitespace();
        let mut next = |what: &str| {
            tok.next()
                .ok_or_else(|| Error::Format(format!("demo record truncated at {what}")))
        };
        let seed: u64 = parse(next("seed")?)?;
        let mode: ExpertMode = next("mode")?.parse()?;
        let outcome: Outcome = next("outcome")?.parse()?;
        let n: usize = parse(next("step count")?)?;
        let mut steps = Vec::with_capacity(n);
        for _ in 0..n {
            let vals: [f64; 6] = [
                parse(next("obs")?)?,
                parse(next("obs")?)?,
                parse(next("obs")?)?,
                parse(next("obs")?)?,
                parse(next("action")?)?,
                parse(next("action")?)?,
            ];
            steps.push(DemoStep {
                observation: Observation {
                    pos: [vals[0], vals[1]],
                    goal_offset: [vals[2], vals[3]],
                },
                action: Action::clipped(vals[4], vals[5]),
            });
        }
        demos.push(DemoEpisode {
            seed,
            mode,
            steps,
            outcome,
        });
    }
    Ok(demos)
}

/// Save demonstrations to a path.
pub fn save_demos_file(path: &Path, demos: &[DemoEpisode]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    save_demos(&mut w, demos)
}

/// Load demonstrations from a path.
pub fn load_demos_file(path: &Path) -> Result<Vec<DemoEpisode>> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    load_demos(&mut r)
}

pub(crate) fn parse<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Format(format!("cannot parse `{s}`")))
}
