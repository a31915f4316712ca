use super::{solve, QpSolution, QpStatus, QuadraticProgram, SolverSettings};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

const RELAXATION_MAX_ITER: usize = 4000;

/// Solves a program with a `{0, level}` selection block in three phases:
/// the continuous relaxation, rounding of the largest relaxed values, and a
/// re-solve with the block fixed.
pub fn solve_relax_and_round(qp: &QuadraticProgram, settings: &SolverSettings) -> Result<QpSolution> {
    qp.validate()?;
    let block = qp
        .binary
        .as_ref()
        .ok_or_else(|| Error::InvalidProblem("relax-and-round needs a binary block".into()))?;
    let m = qp.dim();
    let masked: Vec<usize> = (0..m).filter(|&j| block.mask[j]).collect();

    let mut relaxed = qp.clone();
    relaxed.binary = None;
    for &j in &masked {
        relaxed.lower[j] = relaxed.lower[j].max(0.0);
        relaxed.upper[j] = relaxed.upper[j].min(block.level);
        if relaxed.lower[j] > relaxed.upper[j] {
            return Err(Error::InvalidProblem(format!(
                "variable {j} cannot take a value in [0, {}]",
                block.level
            )));
        }
    }
    let mut card_row = vec![0.0; m];
    for &j in &masked {
        card_row[j] = 1.0;
    }
    let k = qp.n_eq();
    let mut a = DenseMatrix::zeros(k + 1, m);
    for r in 0..k {
        a.row_mut(r).copy_from_slice(qp.a_eq.row(r));
    }
    a.row_mut(k).copy_from_slice(&card_row);
    let mut b = qp.b_eq.clone();
    b.push(block.level * block.cardinality as f64);
    relaxed.a_eq = a;
    relaxed.b_eq = b;

    // rounding reads only the ordering of the relaxed values
    let relax_settings = SolverSettings {
        max_iter: settings.max_iter.min(RELAXATION_MAX_ITER),
        ..*settings
    };
    let phase1 = solve(&relaxed, &relax_settings)?;
    if phase1.status == QpStatus::Infeasible {
        return Ok(QpSolution {
            y_eq: vec![f64::NAN; k],
            ..phase1
        });
    }

    let mut selected = top_indices(&masked, &phase1.x, block.cardinality);
    let mut best = solve_selected(qp, &masked, &selected, block.level, settings)?;
    let mut iterations = phase1.iterations + best.iterations;
    let mut rho_updates = phase1.rho_updates + best.rho_updates;

    // first-improvement exchanges of one, then two, members
    let bound = phase1.is_solved().then_some(phase1.objective);
    let close_enough = |objective: f64| bound.is_some_and(|b| objective - b <= settings.swap_gap * b.abs());
    let mut budget = settings.swap_budget;
    'search: while budget > 0 && best.is_solved() && !close_enough(best.objective) {
        for moves in [exchanges(&masked, &selected, &phase1.x, 1), exchanges(&masked, &selected, &phase1.x, 2)] {
            for (leave, enter) in moves {
                if budget == 0 {
                    break 'search;
                }
                budget -= 1;
                let mut trial: Vec<usize> = selected.iter().copied().filter(|j| !leave.contains(j)).collect();
                trial.extend(&enter);
                trial.sort_unstable();
                let cand = solve_selected(qp, &masked, &trial, block.level, settings)?;
                iterations += cand.iterations;
                rho_updates += cand.rho_updates;
                let margin = 1e-9 * best.objective.abs().max(1e-12);
                if cand.is_solved() && cand.objective < best.objective - margin {
                    best = cand;
                    selected = trial;
                    continue 'search;
                }
            }
        }
        break;
    }
    best.iterations = iterations;
    best.rho_updates = rho_updates;
    best.relaxation_objective = bound;
    Ok(best)
}

/// Candidate exchanges of `size` selected for `size` unselected variables,
/// ordered by the gain in relaxed value. Pairs of pairs are drawn from the
/// eight most marginal members on each side.
fn exchanges(masked: &[usize], selected: &[usize], relaxed: &[f64], size: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
    const MARGINAL: usize = 8;
    let mut inside = selected.to_vec();
    inside.sort_by(|&a, &b| relaxed[a].total_cmp(&relaxed[b]).then(a.cmp(&b)));
    let mut outside: Vec<usize> = masked.iter().copied().filter(|j| !selected.contains(j)).collect();
    outside.sort_by(|&a, &b| relaxed[b].total_cmp(&relaxed[a]).then(a.cmp(&b)));
    let groups = |v: &[usize]| -> Vec<Vec<usize>> {
        match size {
            1 => v.iter().map(|&j| vec![j]).collect(),
            _ => {
                let v = &v[..v.len().min(MARGINAL)];
                let mut out = Vec::new();
                for a in 0..v.len() {
                    for b in a + 1..v.len() {
                        out.push(vec![v[a], v[b]]);
                    }
                }
                out
            }
        }
    };
    let value = |g: &[usize]| g.iter().map(|&j| relaxed[j]).sum::<f64>();
    let mut moves: Vec<(Vec<usize>, Vec<usize>)> = Vec::new();
    for leave in groups(&inside) {
        for enter in groups(&outside) {
            moves.push((leave.clone(), enter));
        }
    }
    moves.sort_by(|a, b| {
        let gain = |m: &(Vec<usize>, Vec<usize>)| value(&m.1) - value(&m.0);
        gain(b).total_cmp(&gain(a)).then(a.cmp(b))
    });
    moves
}

/// Continuous solve with the masked block fixed to `level` on `selected`
/// and to zero elsewhere.
fn solve_selected(
    qp: &QuadraticProgram,
    masked: &[usize],
    selected: &[usize],
    level: f64,
    settings: &SolverSettings,
) -> Result<QpSolution> {
    let mut fixed = qp.clone();
    fixed.binary = None;
    for &j in masked {
        let v = if selected.contains(&j) { level } else { 0.0 };
        fixed.lower[j] = v;
        fixed.upper[j] = v;
    }
    solve(&fixed, settings)
}

/// Largest `count` values among `candidates`, ties to the lower index.
fn top_indices(candidates: &[usize], x: &[f64], count: usize) -> Vec<usize> {
    let mut order = candidates.to_vec();
    order.sort_by(|&a, &b| x[b].total_cmp(&x[a]).then(a.cmp(&b)));
    order.truncate(count);
    order.sort_unstable();
    order
}
