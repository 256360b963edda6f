//! Finite-difference certification of the joint objective.

use diffcore::{check_gradients, GradCheckOptions, GradCheckReport, NumericEval, ParameterStore, Reduction, Tape};

use crate::error::Result;
use crate::model::batch::Batch;
use crate::model::config::ModelConfig;
use crate::model::network::{alignment_loss, decorrelation_loss, forward, project, total_loss, Mode};

/// Terms of a scalar whose ordinary gradient at `store == anchor` equals the
/// backward pass of [`total_loss`] in training mode.
///
/// Reversal and stop-gradient are expressed by freezing inputs at `anchor`:
///
/// `S(θ) = L_C(θ) + λ1·[L_A(H_θ, x_inv(θ0)) − α·L_A(H_θ0, x_inv(θ))] + λ2·L_D`
///
/// where `L_D` projects the frozen backbone output `x(θ0)` with `θ` when the
/// stop-gradient is on, and uses `x_inv(θ), x_con(θ)` otherwise.
pub fn surrogate_objective(store: &ParameterStore, anchor: &ParameterStore, cfg: &ModelConfig, batch: &Batch) -> Result<NumericEval> {
    let mut t0 = Tape::new();
    let fwd0 = forward(&mut t0, anchor, cfg, batch, Mode::Train)?;
    let x_inv0 = t0.value(fwd0.x_inv).clone();
    let x0 = t0.value(fwd0.x).clone();

    let mut tape = Tape::new();
    let fwd = forward(&mut tape, store, cfg, batch, Mode::Train)?;
    let l_c = tape.binary_cross_entropy(fwd.pred, &batch.labels, batch.weights.as_deref(), Reduction::Sum)?;
    let mut terms = vec![tape.value(l_c).item()];
    let mut pattern = Vec::new();

    if cfg.use_alignment {
        let frozen = tape.leaf(x_inv0);
        if let Some((disc_side, _)) = alignment_loss(&mut tape, store, frozen, &batch.source, cfg.alpha)? {
            let mut t2 = Tape::new();
            let moving = t2.leaf(tape.value(fwd.x_inv).clone());
            let (enc_side, _) = alignment_loss(&mut t2, anchor, moving, &batch.source, cfg.alpha)?.expect("both sources present");
            terms.push(cfg.lambda1 * tape.value(disc_side).item());
            terms.push(-cfg.lambda1 * cfg.alpha * t2.value(enc_side).item());
            pattern.extend(t2.activation_pattern());
        }
    }
    if cfg.use_decorrelation {
        let (x_inv, x_con) = if cfg.decorrelation_stop_gradient {
            let x = tape.leaf(x0);
            (project(&mut tape, store, cfg, "inv", x, batch)?, project(&mut tape, store, cfg, "con", x, batch)?)
        } else {
            (fwd.x_inv, fwd.x_con)
        };
        if let Some(l_d) = decorrelation_loss(&mut tape, x_inv, x_con, &batch.source, cfg.pearson_eps)? {
            terms.push(cfg.lambda2 * tape.value(l_d).item());
        }
    }
    pattern.extend(tape.activation_pattern());
    Ok(NumericEval { terms, pattern })
}

/// Compares the training-mode gradient of [`total_loss`] with central
/// differences of [`surrogate_objective`].
pub fn check_objective_gradients(store: &ParameterStore, cfg: &ModelConfig, batch: &Batch, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    check_gradients(
        store,
        |tape, s| {
            let fwd = forward(tape, s, cfg, batch, Mode::Train)?;
            Ok(total_loss(tape, s, cfg, &fwd, batch)?.total)
        },
        |s| surrogate_objective(s, store, cfg, batch),
        opts,
    )
}
