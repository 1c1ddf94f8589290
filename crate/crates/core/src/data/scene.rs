//! Scene layout: elliptical blobs pinned to four lung-quadrant anchors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Quadrant anchors, in the fixed order used when naming regions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Anchor {
    LeftUpper,
    LeftLower,
    RightUpper,
    RightLower,
}

impl Anchor {
    pub const ALL: [Anchor; 4] = [Anchor::LeftUpper, Anchor::LeftLower, Anchor::RightUpper, Anchor::RightLower];

    pub fn name(self) -> &'static str {
        match self {
            Anchor::LeftUpper => "left upper lung",
            Anchor::LeftLower => "left lower lung",
            Anchor::RightUpper => "right upper lung",
            Anchor::RightLower => "right lower lung",
        }
    }

    pub fn is_left(self) -> bool {
        matches!(self, Anchor::LeftUpper | Anchor::LeftLower)
    }

    pub fn is_upper(self) -> bool {
        matches!(self, Anchor::LeftUpper | Anchor::RightUpper)
    }

    /// Quadrant centre `(row, col)` on a `side × side` image. "Left" is the
    /// image's left half.
    pub fn center(self, side: usize) -> (f64, f64) {
        let q = side as f64 / 4.0;
        let row = if self.is_upper() { q } else { 3.0 * q };
        let col = if self.is_left() { q } else { 3.0 * q };
        (row, col)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub side: usize,
    pub min_blobs: usize,
    pub max_blobs: usize,
    pub min_infected: usize,
    pub max_infected: usize,
    /// Maximum displacement of a blob centre from its anchor, in pixels.
    pub jitter: f64,
    pub min_radius: f64,
    pub max_radius: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            side: 64,
            min_blobs: 2,
            max_blobs: 4,
            min_infected: 1,
            max_infected: 3,
            jitter: 4.0,
            min_radius: 6.0,
            max_radius: 10.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.min_blobs < 1 || self.min_blobs > self.max_blobs || self.max_blobs > 4 {
            return bad("blob count bounds must satisfy 1 <= min <= max <= 4");
        }
        if self.min_infected < 1 || self.min_infected > self.max_infected {
            return bad("infected count bounds must satisfy 1 <= min <= max");
        }
        if self.min_infected > self.min_blobs {
            return bad("every scene must be able to hold the minimum number of infected blobs");
        }
        if !(0.0 < self.min_radius && self.min_radius <= self.max_radius) || self.jitter < 0.0 {
            return bad("radii must be positive and ordered; jitter non-negative");
        }
        let q = self.side as f64 / 4.0;
        if q - self.jitter - self.max_radius < 0.0 {
            return bad("blobs could leave the image: reduce jitter or radius");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub anchor: Anchor,
    pub center: (f64, f64),
    /// Semi-axes `(row, col)`.
    pub radii: (f64, f64),
}

impl Blob {
    /// Squared normalized radius of a pixel centre; `<= 1` inside the blob.
    pub fn rho2(&self, row: usize, col: usize) -> f64 {
        let dy = (row as f64 + 0.5 - self.center.0) / self.radii.0;
        let dx = (col as f64 + 0.5 - self.center.1) / self.radii.1;
        dy * dy + dx * dx
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub side: usize,
    pub blobs: Vec<Blob>,
    /// Indices into `blobs` of the mask-positive blobs, ascending.
    pub infected: Vec<usize>,
    pub noise_seed: u64,
}

impl SceneSpec {
    pub fn infected_anchors(&self) -> Vec<Anchor> {
        let mut a: Vec<Anchor> = self.infected.iter().map(|&i| self.blobs[i].anchor).collect();
        a.sort();
        a
    }

    pub fn distractors(&self) -> impl Iterator<Item = &Blob> {
        self.blobs.iter().enumerate().filter(|(i, _)| !self.infected.contains(i)).map(|(_, b)| b)
    }
}

pub fn gen_scene(rng: &mut Rng, cfg: &SceneConfig) -> Result<SceneSpec> {
    cfg.validate()?;
    let n_blobs = rng.range_inclusive(cfg.min_blobs, cfg.max_blobs);
    let mut anchors = Anchor::ALL.to_vec();
    rng.shuffle(&mut anchors);
    anchors.truncate(n_blobs);
    anchors.sort();

    let blobs = anchors
        .into_iter()
        .map(|anchor| {
            let (r, c) = anchor.center(cfg.side);
            Blob {
                anchor,
                center: (r + rng.uniform(-cfg.jitter, cfg.jitter), c + rng.uniform(-cfg.jitter, cfg.jitter)),
                radii: (rng.uniform(cfg.min_radius, cfg.max_radius), rng.uniform(cfg.min_radius, cfg.max_radius)),
            }
        })
        .collect::<Vec<_>>();

    let n_inf = rng.range_inclusive(cfg.min_infected, cfg.max_infected.min(n_blobs));
    let mut idx: Vec<usize> = (0..n_blobs).collect();
    rng.shuffle(&mut idx);
    idx.truncate(n_inf);
    idx.sort();

    Ok(SceneSpec { side: cfg.side, blobs, infected: idx, noise_seed: rng.next_u64() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn same_seed_same_scene() {
        let cfg = SceneConfig::default();
        assert_eq!(gen_scene(&mut Rng::new(4), &cfg).unwrap(), gen_scene(&mut Rng::new(4), &cfg).unwrap());
    }

    #[test]
    fn invariants_hold_over_many_seeds() {
        let cfg = SceneConfig::default();
        let mut infected_anchors = HashSet::new();
        for seed in 0..1000 {
            let s = gen_scene(&mut Rng::new(seed), &cfg).unwrap();
            assert!((2..=4).contains(&s.blobs.len()));
            assert!((1..=3).contains(&s.infected.len()));
            assert!(s.infected.iter().all(|&i| i < s.blobs.len()));
            let anchors: HashSet<_> = s.blobs.iter().map(|b| b.anchor).collect();
            assert_eq!(anchors.len(), s.blobs.len());
            for b in &s.blobs {
                assert!(b.center.0 - b.radii.0 >= 0.0 && b.center.0 + b.radii.0 <= 64.0);
                assert!(b.center.1 - b.radii.1 >= 0.0 && b.center.1 + b.radii.1 <= 64.0);
            }
            infected_anchors.extend(s.infected_anchors());
        }
        assert_eq!(infected_anchors.len(), 4, "every anchor is infected in some scene");
    }

    #[test]
    fn inconsistent_bounds_rejected() {
        let cfg = SceneConfig { min_infected: 3, min_blobs: 2, ..SceneConfig::default() };
        assert!(matches!(gen_scene(&mut Rng::new(0), &cfg), Err(Error::Config(_))));
        let cfg = SceneConfig { min_blobs: 5, max_blobs: 5, ..SceneConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
