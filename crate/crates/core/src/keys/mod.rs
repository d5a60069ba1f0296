//! Key material: vertical shaking rounds and the horizontal permutation table.

mod format;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{dot, l2_norm, DistSpec, Rng};

pub use format::{KEY_MAGIC, KEY_VERSION};

/// Smallest magnitude allowed for an inflate diagonal entry or for the tilt
/// determinant `1 + uᵀm`.
pub const INVERTIBILITY_FLOOR: f64 = 0.05;

/// Vertical shaking operator. Discriminants are the on-disk op ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum VsOp {
    Addv = 1,
    Inflate = 2,
    Tilt = 3,
    DxFixp = 4,
    Gaussian = 5,
    Laplace = 6,
}

impl VsOp {
    pub const ALL: [VsOp; 6] = [
        VsOp::Addv,
        VsOp::Inflate,
        VsOp::Tilt,
        VsOp::DxFixp,
        VsOp::Gaussian,
        VsOp::Laplace,
    ];

    pub fn from_id(id: u8) -> Option<VsOp> {
        VsOp::ALL.into_iter().find(|op| *op as u8 == id)
    }

    pub fn name(self) -> &'static str {
        match self {
            VsOp::Addv => "addv",
            VsOp::Inflate => "inflate",
            VsOp::Tilt => "tilt",
            VsOp::DxFixp => "dx_fixp",
            VsOp::Gaussian => "gaussian",
            VsOp::Laplace => "laplace",
        }
    }

    /// Operators that add one broadcast vector to every embedding row.
    pub fn is_additive(self) -> bool {
        matches!(
            self,
            VsOp::Addv | VsOp::DxFixp | VsOp::Gaussian | VsOp::Laplace
        )
    }

    /// Material length for embedding width `d`.
    pub fn material_len(self, d: usize) -> usize {
        match self {
            VsOp::Tilt => 2 * d,
            _ => d,
        }
    }
}

impl std::fmt::Display for VsOp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Operator together with its user-supplied hyperparameters. `delta` is the
/// overall scale Δ applied to the sampled material.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum OpParams {
    /// Uniform [0,1) vector times Δ.
    Addv { delta: f64 },
    /// Diagonal `1 + Δ·N(0, σ²)`, magnitudes clamped to the floor.
    Inflate { delta: f64, sigma: f64 },
    /// `T = I + Δ·v·uᵀ`, `v ~ N(0, σ²)`, `u` a random unit vector.
    Tilt { delta: f64, sigma: f64 },
    /// Uniform direction with Gamma(k, Θ) norm, times Δ.
    DxFixp { delta: f64, k: f64, theta: f64 },
    /// `N(0, ε²)` entries times Δ.
    Gaussian { delta: f64, epsilon: f64 },
    /// `Lap(0, ε)` entries times Δ.
    Laplace { delta: f64, epsilon: f64 },
}

impl OpParams {
    pub fn op(&self) -> VsOp {
        match self {
            OpParams::Addv { .. } => VsOp::Addv,
            OpParams::Inflate { .. } => VsOp::Inflate,
            OpParams::Tilt { .. } => VsOp::Tilt,
            OpParams::DxFixp { .. } => VsOp::DxFixp,
            OpParams::Gaussian { .. } => VsOp::Gaussian,
            OpParams::Laplace { .. } => VsOp::Laplace,
        }
    }

    pub fn delta(&self) -> f64 {
        match *self {
            OpParams::Addv { delta }
            | OpParams::Inflate { delta, .. }
            | OpParams::Tilt { delta, .. }
            | OpParams::DxFixp { delta, .. }
            | OpParams::Gaussian { delta, .. }
            | OpParams::Laplace { delta, .. } => delta,
        }
    }

    /// Same hyperparameters with a different Δ.
    pub fn with_delta(mut self, new: f64) -> Self {
        match &mut self {
            OpParams::Addv { delta }
            | OpParams::Inflate { delta, .. }
            | OpParams::Tilt { delta, .. }
            | OpParams::DxFixp { delta, .. }
            | OpParams::Gaussian { delta, .. }
            | OpParams::Laplace { delta, .. } => *delta = new,
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let delta = self.delta();
        if !delta.is_finite() || delta < 0.0 {
            return Err(Error::param(
                "delta",
                format!("must be finite and >= 0, got {delta}"),
            ));
        }
        match *self {
            OpParams::Addv { .. } => Ok(()),
            OpParams::Inflate { sigma, .. } | OpParams::Tilt { sigma, .. } => DistSpec::Gaussian {
                mean: 0.0,
                std: sigma,
            }
            .validate()
            .map_err(|_| Error::param("sigma", format!("must be finite and >= 0, got {sigma}"))),
            OpParams::DxFixp { k, theta, .. } => {
                if !(k > 0.0 && k.is_finite()) {
                    return Err(Error::param("k", format!("must be > 0, got {k}")));
                }
                if !(theta > 0.0 && theta.is_finite()) {
                    return Err(Error::param("theta", format!("must be > 0, got {theta}")));
                }
                Ok(())
            }
            OpParams::Gaussian { epsilon, .. } => {
                if !(epsilon >= 0.0 && epsilon.is_finite()) {
                    return Err(Error::param(
                        "epsilon",
                        format!("must be >= 0, got {epsilon}"),
                    ));
                }
                Ok(())
            }
            OpParams::Laplace { epsilon, .. } => {
                if !(epsilon > 0.0 && epsilon.is_finite()) {
                    return Err(Error::param(
                        "epsilon",
                        format!("must be > 0, got {epsilon}"),
                    ));
                }
                Ok(())
            }
        }
    }

    /// Sample this operator's material for width `d`.
    fn keygen(&self, d: usize, rng: &mut Rng) -> Vec<f64> {
        let delta = self.delta();
        match *self {
            OpParams::Addv { .. } => {
                let u = DistSpec::Uniform {
                    low: 0.0,
                    high: 1.0,
                };
                (0..d).map(|_| u.draw(rng) * delta).collect()
            }
            OpParams::Inflate { sigma, .. } => {
                let g = DistSpec::Gaussian {
                    mean: 0.0,
                    std: sigma,
                };
                (0..d)
                    .map(|_| clamp_away_from_zero(1.0 + delta * g.draw(rng)))
                    .collect()
            }
            OpParams::Tilt { sigma, .. } => {
                let u = unit_vector(d, rng);
                let g = DistSpec::Gaussian {
                    mean: 0.0,
                    std: sigma,
                };
                let m = loop {
                    let m: Vec<f64> = (0..d).map(|_| delta * g.draw(rng)).collect();
                    if (1.0 + dot(&u, &m)).abs() >= INVERTIBILITY_FLOOR {
                        break m;
                    }
                };
                let mut material = m;
                material.extend_from_slice(&u);
                material
            }
            OpParams::DxFixp { k, theta, .. } => {
                let dir = unit_vector(d, rng);
                let r = DistSpec::Gamma {
                    shape: k,
                    scale: theta,
                }
                .draw(rng);
                dir.into_iter().map(|x| x * r * delta).collect()
            }
            OpParams::Gaussian { epsilon, .. } => {
                let g = DistSpec::Gaussian {
                    mean: 0.0,
                    std: epsilon,
                };
                (0..d).map(|_| g.draw(rng) * delta).collect()
            }
            OpParams::Laplace { epsilon, .. } => {
                let l = DistSpec::Laplace {
                    loc: 0.0,
                    scale: epsilon,
                };
                (0..d).map(|_| l.draw(rng) * delta).collect()
            }
        }
    }
}

fn clamp_away_from_zero(x: f64) -> f64 {
    if x.abs() >= INVERTIBILITY_FLOOR {
        x
    } else if x < 0.0 {
        -INVERTIBILITY_FLOOR
    } else {
        INVERTIBILITY_FLOOR
    }
}

fn unit_vector(d: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.next_normal()).collect();
        let n = l2_norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// One vertical transformation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VsRound {
    pub params: OpParams,
    /// Sampled vector(s). Tilt stores `Δ·v` followed by `u`.
    pub material: Vec<f64>,
}

impl VsRound {
    pub fn op(&self) -> VsOp {
        self.params.op()
    }

    pub fn delta(&self) -> f64 {
        self.params.delta()
    }

    /// Check material against embedding width `d`.
    pub fn validate(&self, d: usize) -> Result<()> {
        self.params.validate()?;
        let want = self.op().material_len(d);
        if self.material.len() != want {
            return Err(Error::Incompatible(format!(
                "{} material has {} values, embedding width {d} needs {want}",
                self.op(),
                self.material.len()
            )));
        }
        if self.material.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(format!(
                "{} material not finite",
                self.op()
            )));
        }
        match self.op() {
            VsOp::Inflate => {
                if let Some(x) = self.material.iter().find(|x| x.abs() < INVERTIBILITY_FLOOR) {
                    return Err(Error::param(
                        "material",
                        format!("inflate entry {x} below invertibility floor"),
                    ));
                }
            }
            VsOp::Tilt => {
                let (m, u) = self.material.split_at(d);
                if (l2_norm(u) - 1.0).abs() > 1e-9 {
                    return Err(Error::param(
                        "material",
                        "tilt direction is not unit length",
                    ));
                }
                if (1.0 + dot(u, m)).abs() < INVERTIBILITY_FLOOR {
                    return Err(Error::param("material", "tilt matrix is not invertible"));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Whether applying this round leaves every weight unchanged.
    pub fn is_identity(&self) -> bool {
        match self.op() {
            VsOp::Inflate => self.material.iter().all(|&x| x == 1.0),
            VsOp::Tilt => {
                let d = self.material.len() / 2;
                self.material[..d].iter().all(|&x| x == 0.0)
            }
            _ => self.material.iter().all(|&x| x == 0.0),
        }
    }
}

/// Secret vocabulary permutation: original id `i` is sent as `tab[i]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HorizontalKey {
    tab: Vec<u32>,
    inv: Vec<u32>,
}

impl HorizontalKey {
    pub fn new(tab: Vec<u32>) -> Result<Self> {
        let n = tab.len();
        if n == 0 {
            return Err(Error::Config(
                "horizontal key needs a nonempty vocabulary".into(),
            ));
        }
        let mut inv = vec![u32::MAX; n];
        for (i, &t) in tab.iter().enumerate() {
            let slot = inv.get_mut(t as usize).ok_or_else(|| {
                Error::NotBijection(format!("entry {i} maps to {t}, outside 0..{n}"))
            })?;
            if *slot != u32::MAX {
                return Err(Error::NotBijection(format!(
                    "id {t} appears twice (positions {} and {i})",
                    *slot
                )));
            }
            *slot = i as u32;
        }
        Ok(HorizontalKey { tab, inv })
    }

    pub fn identity(vocab: usize) -> Self {
        let tab: Vec<u32> = (0..vocab as u32).collect();
        HorizontalKey {
            inv: tab.clone(),
            tab,
        }
    }

    pub fn len(&self) -> usize {
        self.tab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tab.is_empty()
    }

    pub fn table(&self) -> &[u32] {
        &self.tab
    }

    pub fn inverse_table(&self) -> &[u32] {
        &self.inv
    }

    pub fn inverse(&self) -> HorizontalKey {
        HorizontalKey {
            tab: self.inv.clone(),
            inv: self.tab.clone(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.tab.iter().enumerate().all(|(i, &t)| i as u32 == t)
    }

    /// `self` applied after `first`: id `i` maps to `self[first[i]]`.
    pub fn compose_after(&self, first: &HorizontalKey) -> Result<HorizontalKey> {
        if self.len() != first.len() {
            return Err(Error::Incompatible("permutation lengths differ".into()));
        }
        HorizontalKey::new(first.tab.iter().map(|&t| self.tab[t as usize]).collect())
    }
}

/// Generation settings: the candidate operators with their hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeyGenConfig {
    /// Number of vertical rounds.
    pub rounds: usize,
    /// Candidate operators; each round picks one uniformly.
    pub ops: Vec<OpParams>,
}

impl KeyGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds > 0 && self.ops.is_empty() {
            return Err(Error::Config(
                "vertical key needs at least one operator when rounds > 0".into(),
            ));
        }
        if self.rounds > u16::MAX as usize {
            return Err(Error::param("rounds", "at most 65535"));
        }
        self.ops.iter().try_for_each(OpParams::validate)
    }
}

/// Vertical rounds: each picks an operator uniformly from `allowed` and samples its material.
pub fn generate_vertical_key(
    rounds: usize,
    allowed: &[OpParams],
    d: usize,
    rng: &mut Rng,
) -> Result<Vec<VsRound>> {
    if d == 0 {
        return Err(Error::param("d", "embedding width must be >= 1"));
    }
    if rounds > 0 && allowed.is_empty() {
        return Err(Error::Config(
            "vertical key needs at least one operator when rounds > 0".into(),
        ));
    }
    allowed.iter().try_for_each(OpParams::validate)?;
    Ok((0..rounds)
        .map(|_| {
            let o = rng.below(allowed.len() as u64) as usize;
            let params = allowed[o];
            VsRound {
                material: params.keygen(d, rng),
                params,
            }
        })
        .collect())
}

/// Uniform random permutation of `0..vocab` (Fisher–Yates).
pub fn generate_horizontal_key(vocab: usize, rng: &mut Rng) -> Result<HorizontalKey> {
    if vocab == 0 {
        return Err(Error::Config("vocabulary size must be >= 1".into()));
    }
    if vocab > u32::MAX as usize {
        return Err(Error::Config("vocabulary too large".into()));
    }
    let mut tab: Vec<u32> = (0..vocab as u32).collect();
    rng.shuffle(&mut tab);
    HorizontalKey::new(tab)
}

/// Client-held key pair.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyPair {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub seed: u64,
    pub rounds: Vec<VsRound>,
    pub hs: HorizontalKey,
}

impl KeyPair {
    /// Pure function of `(cfg, vocab, d, seed)`.
    pub fn generate(cfg: &KeyGenConfig, vocab: usize, d: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let rounds = generate_vertical_key(
            cfg.rounds,
            &cfg.ops,
            d,
            &mut Rng::stream(seed, "vertical-key"),
        )?;
        let hs = generate_horizontal_key(vocab, &mut Rng::stream(seed, "horizontal-key"))?;
        Ok(KeyPair {
            vocab_size: vocab,
            embed_dim: d,
            seed,
            rounds,
            hs,
        })
    }

    /// No vertical rounds and an identity table.
    pub fn null(vocab: usize, d: usize) -> Self {
        KeyPair {
            vocab_size: vocab,
            embed_dim: d,
            seed: 0,
            rounds: Vec::new(),
            hs: HorizontalKey::identity(vocab),
        }
    }

    pub fn is_null(&self) -> bool {
        self.rounds.is_empty() && self.hs.is_identity()
    }

    /// Table clients encode with once the pair is implanted. With
    /// `hs_once` the table is applied a single time; otherwise it is
    /// re-applied every vertical round and composes with itself.
    pub fn encoding_key(&self, hs_once: bool) -> HorizontalKey {
        let times = if hs_once { 1 } else { self.rounds.len().max(1) };
        let mut key = self.hs.clone();
        for _ in 1..times {
            key = self.hs.compose_after(&key).expect("same length");
        }
        key
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::param("embed_dim", "must be >= 1"));
        }
        if self.hs.len() != self.vocab_size {
            return Err(Error::Incompatible(format!(
                "table length {} != vocab size {}",
                self.hs.len(),
                self.vocab_size
            )));
        }
        for (i, r) in self.rounds.iter().enumerate() {
            r.validate(self.embed_dim).map_err(|e| e.in_round(i))?;
        }
        Ok(())
    }
}
