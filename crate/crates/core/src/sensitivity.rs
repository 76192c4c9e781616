//! Post-training exploitation of the dual variables: layer ranking,
//! mixed-precision assignment, constraint-tightness sweeps, and an empirical
//! subgradient probe.

use crate::constraints::ConstraintSet;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::loss::softmax_cross_entropy;
use crate::quantize::QuantSpec;
use crate::shadow::{ModelSpec, ShadowModel};
use crate::tensor::Real;
use crate::trainer::{train_pdqat, DualState, TrainRunConfig};

/// Layers ordered by descending multiplier; ties break toward the lower
/// layer id.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRanking {
    /// `(layer id, lambda)` entries, most sensitive first.
    pub entries: Vec<(usize, f64)>,
}

impl LayerRanking {
    fn from_lambdas(mut entries: Vec<(usize, f64)>) -> Self {
        entries.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .expect("multipliers are finite")
                .then(a.0.cmp(&b.0))
        });
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Rank constrained layers by their final multipliers.
pub fn rank_layers(duals: &DualState) -> LayerRanking {
    LayerRanking::from_lambdas(duals.layer_lambdas.clone())
}

/// Alternative statistic for oscillating multipliers: rank by the
/// trajectory mean instead of the final value.
pub fn rank_layers_by_trajectory_mean(duals: &DualState) -> LayerRanking {
    LayerRanking::from_lambdas(duals.trajectory_mean())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectMode {
    /// De-quantize the layers with the largest multipliers.
    Top,
    /// De-quantize the layers with the smallest multipliers.
    Bottom,
}

impl SelectMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "top" => Ok(SelectMode::Top),
            "bottom" => Ok(SelectMode::Bottom),
            _ => Err(Error::Input(format!(
                "mode must be 'top' or 'bottom', got {s:?}"
            ))),
        }
    }
}

/// Disable quantization on `k` layers chosen from the ranking, evaluate the
/// quantized model, and restore the original precision assignment.
pub fn mixed_precision_eval<R: Real>(
    model: &mut ShadowModel<R>,
    ranking: &LayerRanking,
    k: usize,
    mode: SelectMode,
    dataset: &Dataset,
) -> Result<f64> {
    if k > ranking.len() {
        return Err(Error::Input(format!(
            "k = {k} exceeds the {} constrained layers",
            ranking.len()
        )));
    }
    let chosen: Vec<usize> = match mode {
        SelectMode::Top => ranking.entries[..k].iter().map(|&(l, _)| l).collect(),
        SelectMode::Bottom => ranking.entries[ranking.len() - k..]
            .iter()
            .map(|&(l, _)| l)
            .collect(),
    };
    let saved = model.quant.clone();
    for &layer in &chosen {
        model.set_precision(layer, false, 1)?;
    }
    let accuracy = model.quantized_eval_accuracy(dataset);
    model.quant = saved;
    accuracy
}

// ---------------------------------------------------------------------------
// Subgradient probe
// ---------------------------------------------------------------------------

/// Which constraint bound the probe or sweep perturbs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeTarget {
    Output,
    Layer(usize),
}

/// Everything needed to train one run from scratch.
#[derive(Debug, Clone)]
pub struct RunSetup {
    pub spec: ModelSpec,
    pub quant: QuantSpec,
    pub constraints: ConstraintSet,
    pub config: TrainRunConfig,
    /// Seed for parameter initialization (the train config seeds batching).
    pub init_seed: u64,
}

impl RunSetup {
    fn train_once(
        &self,
        constraints: &ConstraintSet,
        data: &Dataset,
    ) -> Result<(ShadowModel<f64>, DualState)> {
        let mut model = ShadowModel::build(self.spec.clone(), self.quant.clone(), self.init_seed)?;
        let ids = if self.config.layerwise {
            model.interior_ids()
        } else {
            Vec::new()
        };
        let mut duals = DualState::new(&ids, self.config.dual_lr);
        train_pdqat(&mut model, &mut duals, constraints, &self.config, data)?;
        Ok((model, duals))
    }
}

/// Probe results over one epsilon grid.
#[derive(Debug, Clone)]
pub struct SensitivityProbe {
    pub grid: Vec<f64>,
    /// Final training objective (empirical risk of the full-precision model).
    pub objectives: Vec<f64>,
    /// Final multiplier of the probed constraint.
    pub lambdas: Vec<f64>,
    pub converged: Vec<bool>,
    /// Per grid point: the minimum over other converged points of
    /// `P(eps') - P(eps) + lambda(eps) (eps' - eps)`; NaN when undefined.
    pub worst_margins: Vec<f64>,
}

impl SensitivityProbe {
    /// Margin for an ordered grid pair; zero when the indices coincide.
    pub fn margin(&self, i: usize, j: usize) -> f64 {
        self.objectives[j] - self.objectives[i] + self.lambdas[i] * (self.grid[j] - self.grid[i])
    }
}

fn apply_target(constraints: &mut ConstraintSet, target: ProbeTarget, value: f64) -> Result<()> {
    match target {
        ProbeTarget::Output => constraints.eps_out = value,
        ProbeTarget::Layer(layer) => {
            let entry = constraints
                .layer_eps
                .iter_mut()
                .find(|(l, _)| *l == layer)
                .ok_or_else(|| {
                    Error::Input(format!("layer {} has no layerwise constraint", layer + 1))
                })?;
            entry.1 = value;
        }
    }
    Ok(())
}

/// Train one run per grid point, record the achieved objective and final
/// multiplier, and evaluate all pairwise subgradient margins. Runs whose
/// final objective exceeds `convergence_loss` are flagged and excluded from
/// the margins.
pub fn subgradient_probe(
    setup: &RunSetup,
    target: ProbeTarget,
    grid: &[f64],
    data: &Dataset,
    convergence_loss: f64,
) -> Result<SensitivityProbe> {
    if grid.is_empty() {
        return Err(Error::Input("probe grid must not be empty".into()));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Input(
            "probe grid must be strictly increasing".into(),
        ));
    }
    let mut objectives = Vec::with_capacity(grid.len());
    let mut lambdas = Vec::with_capacity(grid.len());
    let mut converged = Vec::with_capacity(grid.len());
    for &eps in grid {
        let mut constraints = setup.constraints.clone();
        apply_target(&mut constraints, target, eps)?;
        let (mut model, duals) = setup.train_once(&constraints, data)?;
        let objective = empirical_risk(&mut model, data)?;
        let lambda = match target {
            ProbeTarget::Output => duals.lambda_out,
            ProbeTarget::Layer(l) => duals.lambda_for(l).unwrap_or(0.0),
        };
        objectives.push(objective);
        lambdas.push(lambda);
        converged.push(objective <= convergence_loss);
    }
    let mut worst_margins = Vec::with_capacity(grid.len());
    for i in 0..grid.len() {
        let mut worst = f64::NAN;
        if converged[i] {
            for j in 0..grid.len() {
                if i == j || !converged[j] {
                    continue;
                }
                let m = objectives[j] - objectives[i] + lambdas[i] * (grid[j] - grid[i]);
                if worst.is_nan() || m < worst {
                    worst = m;
                }
            }
        }
        worst_margins.push(worst);
    }
    Ok(SensitivityProbe {
        grid: grid.to_vec(),
        objectives,
        lambdas,
        converged,
        worst_margins,
    })
}

/// Mean cross-entropy of the full-precision model over a dataset (eval mode).
pub fn empirical_risk<R: Real>(model: &mut ShadowModel<R>, data: &Dataset) -> Result<f64> {
    let mut total = 0.0f64;
    let batch = 256usize;
    let mut start = 0usize;
    while start < data.len() {
        let end = (start + batch).min(data.len());
        let indices: Vec<usize> = (start..end).collect();
        let x = data.features.gather_rows(&indices).cast::<R>();
        let y: Vec<usize> = indices.iter().map(|&i| data.labels[i]).collect();
        let (logits, _) = model.forward_full(&x, Mode::Eval, false)?;
        let (loss, _) = softmax_cross_entropy(&logits, &y)?;
        total += loss.to_f64_v() * indices.len() as f64;
        start = end;
    }
    Ok(total / data.len() as f64)
}

// ---------------------------------------------------------------------------
// Epsilon sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    EpsOut,
    /// One shared bound for every layerwise constraint.
    EpsLayer,
}

impl SweepParam {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "eps_out" => Ok(SweepParam::EpsOut),
            "eps_layer" => Ok(SweepParam::EpsLayer),
            _ => Err(Error::Input(format!(
                "sweep parameter must be 'eps_out' or 'eps_layer', got {s:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub test_acc: f64,
    pub lambda_final: f64,
}

/// One seeded training run per value; rows report quantized test accuracy
/// and the final multiplier of the swept constraint (mean over layers for
/// the shared layerwise bound).
pub fn epsilon_sweep(
    setup: &RunSetup,
    param: SweepParam,
    values: &[f64],
    train_data: &Dataset,
    test_data: &Dataset,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Input("sweep needs at least one value".into()));
    }
    for (i, a) in values.iter().enumerate() {
        if values[i + 1..].contains(a) {
            return Err(Error::Input(format!("duplicate sweep value {a}")));
        }
    }
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let mut constraints = setup.constraints.clone();
        match param {
            SweepParam::EpsOut => constraints.eps_out = value,
            SweepParam::EpsLayer => constraints.set_all_layer_eps(value),
        }
        let (mut model, duals) = setup.train_once(&constraints, train_data)?;
        let test_acc = model.quantized_eval_accuracy(test_data)?;
        let lambda_final = match param {
            SweepParam::EpsOut => duals.lambda_out,
            SweepParam::EpsLayer => {
                let n = duals.layer_lambdas.len().max(1) as f64;
                duals.layer_lambdas.iter().map(|&(_, v)| v).sum::<f64>() / n
            }
        };
        rows.push(SweepRow {
            value,
            test_acc,
            lambda_final,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticKind};

    fn duals_with(lambdas: &[f64]) -> DualState {
        let ids: Vec<usize> = (0..lambdas.len()).collect();
        let mut d = DualState::new(&ids, 0.01);
        for (slot, &v) in d.layer_lambdas.iter_mut().zip(lambdas) {
            slot.1 = v;
        }
        d
    }

    #[test]
    fn ranking_sorts_descending() {
        let r = rank_layers(&duals_with(&[0.1, 0.9, 0.0]));
        let order: Vec<usize> = r.entries.iter().map(|&(l, _)| l).collect();
        assert_eq!(order, vec![1, 0, 2]);
    }

    #[test]
    fn equal_multipliers_tie_break_by_layer_id() {
        let r = rank_layers(&duals_with(&[0.5, 0.5, 0.5]));
        let order: Vec<usize> = r.entries.iter().map(|&(l, _)| l).collect();
        assert_eq!(order, vec![0, 1, 2]);
    }

    #[test]
    fn trajectory_mean_ranking_uses_the_history() {
        let mut d = duals_with(&[0.0, 0.0]);
        // layer 0 spiked early and decayed; layer 1 never moved
        d.trajectory.push(crate::trainer::DualSnapshot {
            layer_lambdas: vec![0.8, 0.0],
            lambda_out: 1.0,
        });
        d.trajectory.push(crate::trainer::DualSnapshot {
            layer_lambdas: vec![0.0, 0.0],
            lambda_out: 1.0,
        });
        let final_rank = rank_layers(&d);
        assert_eq!(final_rank.entries[0].0, 0); // tie broken by id
        let mean_rank = rank_layers_by_trajectory_mean(&d);
        assert_eq!(mean_rank.entries[0], (0, 0.4));
        assert_eq!(mean_rank.entries[1], (1, 0.0));
    }

    #[test]
    fn positive_rescaling_preserves_the_ranking() {
        let base = rank_layers(&duals_with(&[0.3, 0.05, 0.7, 0.2]));
        let scaled = rank_layers(&duals_with(&[0.9, 0.15, 2.1, 0.6]));
        let o1: Vec<usize> = base.entries.iter().map(|&(l, _)| l).collect();
        let o2: Vec<usize> = scaled.entries.iter().map(|&(l, _)| l).collect();
        assert_eq!(o1, o2);
        // and the ranking is a permutation of the constrained layer ids
        let mut ids = o1.clone();
        ids.sort_unstable();
        assert_eq!(ids, vec![0, 1, 2, 3]);
    }

    #[test]
    fn mixed_eval_k0_equals_plain_quantized_accuracy() {
        let spec = ModelSpec::dense_stack(2, &[6, 6], 2);
        let quant = QuantSpec::from_bits(&[0, 1, 0], 1).unwrap();
        let mut model = ShadowModel::<f64>::build(spec, quant, 3).unwrap();
        let data = gen_synthetic(SyntheticKind::Blobs, 40, 2, 0.5, 2).unwrap();
        let ranking = rank_layers(&duals_with(&[0.2, 0.1]));
        let base = model.quantized_eval_accuracy(&data).unwrap();
        let acc = mixed_precision_eval(&mut model, &ranking, 0, SelectMode::Top, &data).unwrap();
        assert_eq!(acc, base);
        // spec restored
        assert_eq!(model.quant.to_bits(), vec![0, 1, 0]);
    }

    #[test]
    fn mixed_eval_full_k_equals_full_precision_accuracy() {
        let spec = ModelSpec::dense_stack(2, &[6, 6], 2);
        let quant = QuantSpec::from_bits(&[0, 1, 0], 1).unwrap();
        let mut model = ShadowModel::<f64>::build(spec, quant, 5).unwrap();
        let data = gen_synthetic(SyntheticKind::Blobs, 40, 2, 0.5, 4).unwrap();
        let ranking = rank_layers(&duals_with(&[0.2, 0.1]));
        let full = model.full_eval_accuracy(&data).unwrap();
        let acc = mixed_precision_eval(
            &mut model,
            &ranking,
            ranking.len(),
            SelectMode::Bottom,
            &data,
        )
        .unwrap();
        assert_eq!(acc, full);
    }

    #[test]
    fn mixed_eval_rejects_out_of_range_k() {
        let spec = ModelSpec::dense_stack(2, &[6], 2);
        let quant = QuantSpec::from_bits(&[0, 0], 1).unwrap();
        let mut model = ShadowModel::<f64>::build(spec, quant, 5).unwrap();
        let data = gen_synthetic(SyntheticKind::Blobs, 10, 2, 0.5, 4).unwrap();
        let ranking = rank_layers(&duals_with(&[0.2]));
        assert!(mixed_precision_eval(&mut model, &ranking, 5, SelectMode::Top, &data).is_err());
    }

    #[test]
    fn probe_margin_is_zero_on_the_diagonal() {
        let probe = SensitivityProbe {
            grid: vec![0.1, 0.5],
            objectives: vec![0.4, 0.3],
            lambdas: vec![0.7, 0.1],
            converged: vec![true, true],
            worst_margins: vec![0.0, 0.0],
        };
        assert_eq!(probe.margin(0, 0), 0.0);
        assert_eq!(probe.margin(1, 1), 0.0);
        // hand value: P(1) - P(0) + l(0)(e1 - e0) = -0.1 + 0.7*0.4
        assert!((probe.margin(0, 1) - 0.18).abs() < 1e-12);
    }

    #[test]
    fn probe_rejects_non_increasing_grids() {
        let setup = RunSetup {
            spec: ModelSpec::dense_stack(2, &[4], 2),
            quant: QuantSpec::from_bits(&[0, 0], 2).unwrap(),
            constraints: ConstraintSet::from_quant_spec(&QuantSpec::from_bits(&[0, 0], 2).unwrap())
                .unwrap(),
            config: TrainRunConfig {
                epochs: 1,
                early_stop: false,
                ..Default::default()
            },
            init_seed: 1,
        };
        let data = gen_synthetic(SyntheticKind::Blobs, 10, 2, 0.5, 1).unwrap();
        let err = subgradient_probe(&setup, ProbeTarget::Output, &[0.5, 0.5], &data, 10.0);
        assert!(err.is_err());
    }

    #[test]
    fn sweep_rejects_duplicates_and_empty_lists() {
        let setup = RunSetup {
            spec: ModelSpec::dense_stack(2, &[4], 2),
            quant: QuantSpec::from_bits(&[0, 0], 2).unwrap(),
            constraints: ConstraintSet::from_quant_spec(&QuantSpec::from_bits(&[0, 0], 2).unwrap())
                .unwrap(),
            config: TrainRunConfig {
                epochs: 1,
                early_stop: false,
                ..Default::default()
            },
            init_seed: 1,
        };
        let data = gen_synthetic(SyntheticKind::Blobs, 10, 2, 0.5, 1).unwrap();
        assert!(epsilon_sweep(&setup, SweepParam::EpsOut, &[], &data, &data).is_err());
        assert!(epsilon_sweep(&setup, SweepParam::EpsOut, &[0.2, 0.2], &data, &data).is_err());
    }

    /// Single-value sweep equals a plain training run with that bound.
    #[test]
    fn single_value_sweep_matches_direct_run() {
        let quant = QuantSpec::from_bits(&[0, 2, 0], 2).unwrap();
        let setup = RunSetup {
            spec: ModelSpec::dense_stack(2, &[5, 5], 2),
            quant: quant.clone(),
            constraints: ConstraintSet::from_quant_spec(&quant).unwrap(),
            config: TrainRunConfig {
                epochs: 3,
                batch_size: 20,
                early_stop: false,
                seed: 4,
                ..Default::default()
            },
            init_seed: 9,
        };
        let train = gen_synthetic(SyntheticKind::Blobs, 40, 2, 0.5, 6).unwrap();
        let test = gen_synthetic(SyntheticKind::Blobs, 15, 2, 0.5, 7).unwrap();
        let rows = epsilon_sweep(&setup, SweepParam::EpsOut, &[0.3], &train, &test).unwrap();
        assert_eq!(rows.len(), 1);

        let mut constraints = setup.constraints.clone();
        constraints.eps_out = 0.3;
        let (mut model, duals) = setup.train_once(&constraints, &train).unwrap();
        let acc = model.quantized_eval_accuracy(&test).unwrap();
        assert_eq!(rows[0].test_acc, acc);
        assert_eq!(rows[0].lambda_final, duals.lambda_out);
    }
}
