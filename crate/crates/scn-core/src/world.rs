//! Deterministic bouncing-sprite world: config, dynamics, rasterization.

use crate::error::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Static description of a sprite world. Colors are 8-bit RGB; positions and
/// speeds are in pixels (per step).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub width: usize,
    pub height: usize,
    pub num_objects: usize,
    pub sprite_radius: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    pub episode_length: usize,
    pub palette: Vec<[u8; 3]>,
    pub background: [u8; 3],
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            width: 64,
            height: 64,
            num_objects: 3,
            sprite_radius: 5.0,
            speed_min: 1.0,
            speed_max: 3.0,
            episode_length: 100,
            palette: vec![[255, 0, 0], [0, 204, 0], [0, 0, 255]],
            background: [0, 0, 0],
            seed: 17,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_objects < 1 {
            return Err(Error::Argument("world: num_objects must be ≥ 1".into()));
        }
        if !(self.sprite_radius > 0.0) {
            return Err(Error::Argument("world: sprite_radius must be positive".into()));
        }
        let min_dim = self.width.min(self.height) as f64;
        if 2.0 * self.sprite_radius >= min_dim {
            return Err(Error::Argument(format!(
                "world: 2·sprite_radius ({}) must be smaller than min(width,height) ({min_dim})",
                2.0 * self.sprite_radius
            )));
        }
        if !(self.speed_min > 0.0 && self.speed_min <= self.speed_max) {
            return Err(Error::Argument(format!(
                "world: speed range [{}, {}] must satisfy 0 < min ≤ max",
                self.speed_min, self.speed_max
            )));
        }
        if self.episode_length < 2 {
            return Err(Error::Argument("world: episode_length must be ≥ 2".into()));
        }
        if self.palette.len() != self.num_objects {
            return Err(Error::Argument(format!(
                "world: palette has {} colors for {} objects",
                self.palette.len(),
                self.num_objects
            )));
        }
        for (i, c) in self.palette.iter().enumerate() {
            if *c == self.background {
                return Err(Error::Argument(format!(
                    "world: palette color {i} equals the background color"
                )));
            }
            for (j, c2) in self.palette.iter().enumerate().skip(i + 1) {
                if c == c2 {
                    return Err(Error::Argument(format!(
                        "world: palette colors {i} and {j} are identical"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Names of the objects, in draw/label order.
    pub fn object_names(&self) -> Vec<String> {
        (0..self.num_objects).map(|i| format!("obj{i}")).collect()
    }

    fn x_bounds(&self) -> (f64, f64) {
        (self.sprite_radius, self.width as f64 - self.sprite_radius)
    }

    fn y_bounds(&self) -> (f64, f64) {
        (self.sprite_radius, self.height as f64 - self.sprite_radius)
    }
}

/// Positions and velocities of every sprite, in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub positions: Vec<[f64; 2]>,
    pub velocities: Vec<[f64; 2]>,
}

/// Draws an initial state: positions uniform inside the reachable box,
/// velocities with uniform direction and speed uniform in the speed range.
/// Draw order per object is x, y, angle, speed.
pub fn init_state<R: Rng>(config: &WorldConfig, rng: &mut R) -> WorldState {
    let (x_lo, x_hi) = config.x_bounds();
    let (y_lo, y_hi) = config.y_bounds();
    let mut positions = Vec::with_capacity(config.num_objects);
    let mut velocities = Vec::with_capacity(config.num_objects);
    for _ in 0..config.num_objects {
        let x = rng.random_range(x_lo..x_hi);
        let y = rng.random_range(y_lo..y_hi);
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let speed = rng.random_range(config.speed_min..=config.speed_max);
        positions.push([x, y]);
        velocities.push([speed * angle.cos(), speed * angle.sin()]);
    }
    WorldState { positions, velocities }
}

/// Advances one component by its velocity, folding repeatedly about the walls
/// (elastic reflection; handles several bounces in one step). The velocity
/// only ever flips sign, so its magnitude is conserved exactly.
fn reflect(p: f64, v: f64, lo: f64, hi: f64) -> (f64, f64) {
    let mut p = p + v;
    let mut v = v;
    loop {
        if p < lo {
            p = 2.0 * lo - p;
            v = -v;
        } else if p > hi {
            p = 2.0 * hi - p;
            v = -v;
        } else {
            return (p, v);
        }
    }
}

/// One simulation step. Objects move independently (no collisions) and bounce
/// elastically off the walls, which are inset by the sprite radius.
pub fn simulate_step(state: &WorldState, config: &WorldConfig) -> WorldState {
    let (x_lo, x_hi) = config.x_bounds();
    let (y_lo, y_hi) = config.y_bounds();
    let mut next = state.clone();
    for (pos, vel) in next.positions.iter_mut().zip(next.velocities.iter_mut()) {
        let (px, vx) = reflect(pos[0], vel[0], x_lo, x_hi);
        let (py, vy) = reflect(pos[1], vel[1], y_lo, y_hi);
        *pos = [px, py];
        *vel = [vx, vy];
    }
    next
}

/// Rasterizes a state to an RGB u8 buffer, [3, H, W] row-major. Sprites are
/// filled circles — a pixel (ix,iy) is covered when its integer coordinate is
/// within sprite_radius of the center — drawn in index order, later on top.
pub fn render_u8(state: &WorldState, config: &WorldConfig) -> Vec<u8> {
    let (w, h) = (config.width, config.height);
    let mut buf = vec![0u8; 3 * h * w];
    for c in 0..3 {
        buf[c * h * w..(c + 1) * h * w].fill(config.background[c]);
    }
    let r = config.sprite_radius;
    let r2 = r * r;
    for (pos, color) in state.positions.iter().zip(&config.palette) {
        let [cx, cy] = *pos;
        let y_min = (cy - r).ceil().max(0.0) as usize;
        let y_max = (cy + r).floor().min(h as f64 - 1.0) as usize;
        let x_min = (cx - r).ceil().max(0.0) as usize;
        let x_max = (cx + r).floor().min(w as f64 - 1.0) as usize;
        for iy in y_min..=y_max {
            let dy = iy as f64 - cy;
            for ix in x_min..=x_max {
                let dx = ix as f64 - cx;
                if dx * dx + dy * dy <= r2 {
                    for c in 0..3 {
                        buf[(c * h + iy) * w + ix] = color[c];
                    }
                }
            }
        }
    }
    buf
}
