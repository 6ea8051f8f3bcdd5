//! Whole-model gradient check against central finite differences.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::capr::{CaprConfig, UncertaintySelection};
use crate::data::{self, SceneSpec};
use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::error::Result;
use crate::losses::LossConfig;
use crate::model::{Components, ForwardOptions, Model, ModelConfig, Targets};
use crate::params::{group_of, Init};
use crate::tensor::{Tape, Tensor};

pub const EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Floor of the relative-error denominator, so entries whose gradient is
/// numerically zero are compared absolutely.
pub const DENOM_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, DENOM_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

/// The tiny network used for whole-model checks: four input channels and a
/// 64×96 input, giving a 4×6 lattice.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            in_channels: 4,
            stage_channels: [4, 6, 8, 10],
            stage_depths: [1, 1, 1, 1],
            heads_per_stage: [1, 2, 2, 2],
            mlp_ratio: 2,
        },
        decoder: DecoderConfig {
            width: 8,
            heads: 2,
            dilations: vec![1, 2, 3],
            num_classes: 6,
        },
        capr: CaprConfig {
            k: Some(64),
            iterations: 1,
            hidden: 8,
        },
    }
}

/// A model, one input and its targets.
pub struct Problem {
    pub model: Model,
    pub image: Tensor,
    pub targets: Targets,
    pub losses: LossConfig,
    /// Training progress fed to the band-loss schedule.
    pub progress: f64,
}

impl Problem {
    /// Tiny model with random input and a synthetic 64×96 label map. Zero-
    /// initialized output layers are re-drawn so every path carries a
    /// non-trivial gradient.
    pub fn tiny(seed: u64, components: Components) -> Result<Self> {
        let cfg = tiny_config();
        let mut model = Model::new(&cfg, components, seed)?;
        let mut init = Init::new(seed ^ 0x5eed);
        for name in ["capr.fc2.weight", "decoder.rad.gate.u"] {
            if let Some(id) = model.params().id(name) {
                let shape = model.params().value(id).shape().to_vec();
                *model.params_mut().value_mut(id) = init.normal(&shape, 0.1);
            }
        }
        let image = init.uniform(&[4, 64, 96], -1.0, 1.0);
        let spec = SceneSpec {
            seed,
            size: [64, 96],
            cell_count: 6,
            boundary_noise_px: 1,
            ..SceneSpec::default()
        };
        let losses = LossConfig::default();
        let targets = Targets::new(&data::generate(&spec, 0)?.gt_noisy, &losses)?;
        Ok(Self {
            model,
            image,
            targets,
            losses,
            progress: 0.25,
        })
    }

    fn loss(&self, selections: Option<&[UncertaintySelection]>) -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(self.image.clone());
        let out = self.model.forward(&mut tape, x, ForwardOptions { selections })?;
        let l = self
            .model
            .losses(&mut tape, &out, &self.targets, &self.losses, self.progress)?;
        Ok(tape.value(l.total).item())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupResult {
    pub group: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub worst: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub groups: Vec<GroupResult>,
    pub tolerance: f64,
    pub failing: Vec<String>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.failing.is_empty()
    }
}

/// Hook applied to each analytic parameter gradient before comparison.
pub type GradHook<'a> = &'a dyn Fn(&str, &mut Tensor);

/// Checks every entry of every parameter the forward pass reads. The point
/// refinement selection is computed once and held fixed, since it is a
/// discrete function of the logits.
pub fn run(problem: &mut Problem, hook: Option<GradHook<'_>>) -> Result<GradcheckReport> {
    let mut tape = Tape::new();
    let x = tape.constant(problem.image.clone());
    let out = problem.model.forward(&mut tape, x, ForwardOptions::default())?;
    let l = problem
        .model
        .losses(&mut tape, &out, &problem.targets, &problem.losses, problem.progress)?;
    let used = tape.params_used();
    let grads = tape.backward(l.total)?;
    let selections = out.selections;

    let mut groups: BTreeMap<String, GroupResult> = BTreeMap::new();
    for id in used {
        let name = problem.model.params().name(id).to_string();
        let mut analytic = match grads.param(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(problem.model.params().value(id).shape()),
        };
        if let Some(h) = hook {
            h(&name, &mut analytic);
        }
        let mut worst = 0.0f64;
        for i in 0..analytic.numel() {
            let orig = problem.model.params().value(id).data()[i];
            problem.model.params_mut().value_mut(id).data_mut()[i] = orig + EPS;
            let plus = problem.loss(Some(&selections))?;
            problem.model.params_mut().value_mut(id).data_mut()[i] = orig - EPS;
            let minus = problem.loss(Some(&selections))?;
            problem.model.params_mut().value_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * EPS);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
        let g = groups
            .entry(group_of(&name).to_string())
            .or_insert_with(|| GroupResult {
                group: group_of(&name).to_string(),
                entries: 0,
                max_rel_error: 0.0,
                worst: name.clone(),
            });
        g.entries += analytic.numel();
        if worst > g.max_rel_error {
            g.max_rel_error = worst;
            g.worst = name;
        }
    }
    let groups: Vec<GroupResult> = groups.into_values().collect();
    let failing = groups
        .iter()
        .filter(|g| !(g.max_rel_error < TOLERANCE))
        .map(|g| g.group.clone())
        .collect();
    Ok(GradcheckReport {
        groups,
        tolerance: TOLERANCE,
        failing,
    })
}
