//! Sampler and editing plans plus the scalar schedule/guidance algebra they
//! rely on. Nothing here touches a network, so it also builds for the browser
//! demo.

use std::fmt;
use std::str::FromStr;

use crate::error::{Result, SphereError};

/// Where classifier-free guidance is applied during generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CfgPosition {
    #[default]
    None,
    /// Latent space, after the encoder (refinement steps only).
    Enc,
    /// Pixel space, after the decoder.
    Dec,
    /// Both, with `√s` at each position.
    Combo,
}

impl CfgPosition {
    pub fn uses_encoder(self) -> bool {
        matches!(self, CfgPosition::Enc | CfgPosition::Combo)
    }

    pub fn uses_decoder(self) -> bool {
        matches!(self, CfgPosition::Dec | CfgPosition::Combo)
    }
}

impl fmt::Display for CfgPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CfgPosition::None => "none",
            CfgPosition::Enc => "enc",
            CfgPosition::Dec => "dec",
            CfgPosition::Combo => "combo",
        })
    }
}

impl FromStr for CfgPosition {
    type Err = SphereError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(CfgPosition::None),
            "enc" => Ok(CfgPosition::Enc),
            "dec" => Ok(CfgPosition::Dec),
            "combo" => Ok(CfgPosition::Combo),
            other => Err(SphereError::Config(format!(
                "unknown cfg position {other:?} (expected none|enc|dec|combo)"
            ))),
        }
    }
}

/// Few-step generation plan.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerPlan {
    pub steps: usize,
    pub gamma: f64,
    pub share_noise: bool,
    pub cfg_scale: f64,
    pub cfg_position: CfgPosition,
    pub truncation: Option<f64>,
    pub r_override: Option<f64>,
    pub seed: u64,
}

impl Default for SamplerPlan {
    /// Fixed noise strength (`γ = 0`) with one noise vector shared by every step.
    fn default() -> Self {
        Self {
            steps: 1,
            gamma: 0.0,
            share_noise: true,
            cfg_scale: 1.0,
            cfg_position: CfgPosition::None,
            truncation: None,
            r_override: None,
            seed: 0,
        }
    }
}

impl SamplerPlan {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(SphereError::Config("sampler steps must be >= 1".into()));
        }
        if !(self.gamma >= 0.0) {
            return Err(SphereError::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.cfg_scale >= 0.0) {
            return Err(SphereError::Config(format!(
                "cfg scale must be >= 0, got {}",
                self.cfg_scale
            )));
        }
        if let Some(t) = self.truncation {
            if !(t > 0.0) {
                return Err(SphereError::Config(format!("truncation must be > 0, got {t}")));
            }
        }
        if let Some(r) = self.r_override {
            if !(r >= 0.0) {
                return Err(SphereError::Config(format!("r override must be >= 0, got {r}")));
            }
        }
        Ok(())
    }

    /// Guidance scale used at each active position.
    pub fn per_position_scale(&self) -> f64 {
        per_position_scale(self.cfg_scale, self.cfg_position)
    }

    /// Noise strength `r` at refinement step `t` (2..=T).
    pub fn r_at(&self, t: usize) -> f64 {
        self.r_override
            .unwrap_or_else(|| decay_r(t, self.steps, self.gamma))
    }

    pub fn nfe(&self) -> usize {
        declared_nfe(self.steps, self.cfg_position)
    }
}

/// `r = (1 − (t−1)/(T−1))^γ` for refinement step `t ∈ [2, T]`.
///
/// `γ = 0` is the fixed schedule (`r = 1` everywhere, including `0^0`).
pub fn decay_r(t: usize, steps: usize, gamma: f64) -> f64 {
    assert!(steps >= 2, "decay schedule needs at least two steps");
    assert!((2..=steps).contains(&t), "step {t} outside 2..={steps}");
    let base = 1.0 - (t - 1) as f64 / (steps - 1) as f64;
    base.powf(gamma)
}

pub fn per_position_scale(scale: f64, position: CfgPosition) -> f64 {
    match position {
        CfgPosition::Combo => scale.sqrt(),
        _ => scale,
    }
}

/// `uncond + s·(cond − uncond)` elementwise; `s = 1` and `s = 0` return an
/// input exactly.
pub fn apply_cfg(cond: &[f64], uncond: &[f64], scale: f64) -> Result<Vec<f64>> {
    if cond.len() != uncond.len() {
        return Err(SphereError::shape(cond.len(), uncond.len()));
    }
    if scale == 1.0 {
        return Ok(cond.to_vec());
    }
    if scale == 0.0 {
        return Ok(uncond.to_vec());
    }
    Ok(cond
        .iter()
        .zip(uncond)
        .map(|(c, u)| u + scale * (c - u))
        .collect())
}

/// Number of function evaluations for a `steps`-step generation.
///
/// Each step counts once; guidance adds one extra (null-conditioned) pass per
/// position where it is active. Encoder guidance only exists in refinement
/// steps, decoder guidance in every step.
pub fn declared_nfe(steps: usize, position: CfgPosition) -> usize {
    let refinements = steps.saturating_sub(1);
    steps
        + if position.uses_encoder() { refinements } else { 0 }
        + if position.uses_decoder() { steps } else { 0 }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditMode {
    /// Re-render a real image under another class.
    Manipulate,
    /// Harmonize a stitched composite of two images.
    Crossover,
}

impl FromStr for EditMode {
    type Err = SphereError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "manipulate" => Ok(EditMode::Manipulate),
            "crossover" => Ok(EditMode::Crossover),
            other => Err(SphereError::Config(format!(
                "unknown edit mode {other:?} (expected manipulate|crossover)"
            ))),
        }
    }
}

/// Hard split used to build a crossover composite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stitch {
    /// Columns `< at` come from the first image.
    LeftRight { at: usize },
    /// Rows `< at` come from the first image.
    TopBottom { at: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditPlan {
    pub mode: EditMode,
    pub target_class: Option<usize>,
    pub steps: usize,
    pub r: f64,
    pub gamma: f64,
    pub stitch: Option<Stitch>,
    pub seed: u64,
}

impl EditPlan {
    /// Fixed `r = 1.0`, `γ = 0`, no guidance.
    pub fn manipulate(target_class: usize, steps: usize) -> Self {
        Self {
            mode: EditMode::Manipulate,
            target_class: Some(target_class),
            steps,
            r: 1.0,
            gamma: 0.0,
            stitch: None,
            seed: 0,
        }
    }

    /// `r = 0.25` decayed with `γ = 1` over 10 steps.
    pub fn crossover(stitch: Stitch) -> Self {
        Self {
            mode: EditMode::Crossover,
            target_class: None,
            steps: 10,
            r: 0.25,
            gamma: 1.0,
            stitch: Some(stitch),
            seed: 0,
        }
    }

    /// Noise strength at refinement iteration `t` (2..=steps+1 counting the
    /// initial encode as step 1).
    pub fn r_at(&self, t: usize) -> f64 {
        let total = self.steps + 1;
        if total < 2 {
            return self.r;
        }
        self.r * decay_r(t, total, self.gamma)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn decay_examples() {
        for (t, big_t) in [(2, 2), (3, 5), (7, 10)] {
            assert_eq!(decay_r(t, big_t, 0.0), 1.0);
        }
        assert_eq!(decay_r(2, 2, 1.0), 0.0);
        assert_eq!(decay_r(3, 5, 1.0), 0.5);
    }

    #[test]
    #[should_panic]
    fn decay_needs_two_steps() {
        decay_r(1, 1, 1.0);
    }

    #[test]
    fn cfg_identity_and_endpoints() {
        let c = [0.3, -1.2, 4.0];
        let u = [1.0, 2.0, -3.0];
        assert_eq!(apply_cfg(&c, &u, 1.0).unwrap(), c.to_vec());
        assert_eq!(apply_cfg(&c, &u, 0.0).unwrap(), u.to_vec());
        assert!(apply_cfg(&c, &u[..2], 1.0).is_err());
    }

    #[test]
    fn combo_uses_square_root() {
        let s = per_position_scale(1.6, CfgPosition::Combo);
        assert!((s - 1.2649).abs() < 1e-4);
        assert_eq!(per_position_scale(1.6, CfgPosition::Dec), 1.6);
    }

    #[test]
    fn nfe_formula() {
        assert_eq!(declared_nfe(1, CfgPosition::None), 1);
        assert_eq!(declared_nfe(1, CfgPosition::Enc), 1);
        assert_eq!(declared_nfe(1, CfgPosition::Dec), 2);
        assert_eq!(declared_nfe(4, CfgPosition::None), 4);
        assert_eq!(declared_nfe(4, CfgPosition::Enc), 7);
        assert_eq!(declared_nfe(4, CfgPosition::Dec), 8);
        assert_eq!(declared_nfe(4, CfgPosition::Combo), 11);
    }

    #[test]
    fn edit_defaults() {
        let m = EditPlan::manipulate(2, 4);
        assert_eq!((m.r, m.gamma), (1.0, 0.0));
        let c = EditPlan::crossover(Stitch::LeftRight { at: 12 });
        assert_eq!((c.r, c.gamma, c.steps), (0.25, 1.0, 10));
        assert_eq!(c.r_at(2), 0.25 * 0.9);
        assert_eq!(c.r_at(11), 0.0);
    }

    #[test]
    fn positions_parse() {
        for p in ["none", "enc", "dec", "combo"] {
            assert_eq!(p.parse::<CfgPosition>().unwrap().to_string(), p);
        }
        assert!("both".parse::<CfgPosition>().is_err());
    }

    proptest! {
        #[test]
        fn decay_is_nonincreasing(big_t in 2usize..40, gamma in 0.0f64..4.0) {
            let mut prev = f64::INFINITY;
            for t in 2..=big_t {
                let r = decay_r(t, big_t, gamma);
                prop_assert!(r <= prev);
                prop_assert!((0.0..=1.0).contains(&r));
                prev = r;
            }
        }

        #[test]
        fn combo_law_composes_to_identity_at_one(
            c in prop::collection::vec(-5.0f64..5.0, 1..16),
        ) {
            let u: Vec<f64> = c.iter().map(|x| x * 0.5 - 1.0).collect();
            let s = per_position_scale(1.0, CfgPosition::Combo);
            let once = apply_cfg(&c, &u, s).unwrap();
            let twice = apply_cfg(&once, &u, s).unwrap();
            prop_assert_eq!(twice, c);
        }
    }
}
