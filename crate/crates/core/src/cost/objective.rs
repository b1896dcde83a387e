use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SIMPLEX_TOLERANCE: f64 = 1e-6;

/// Per-candidate cost coefficients for every searchable layer, plus the
/// costs of fixed layers. Each fixed cost is tagged with the number of
/// searchable layers in front of it, so every total below is summed in
/// network order and a one-hot expectation equals the hard cost bit for
/// bit.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CostCoefficients {
    pub per_layer: Vec<Vec<f64>>,
    pub fixed: Vec<(usize, f64)>,
}

/// One summand of a network-order total.
#[derive(Debug, Clone, Copy)]
enum Term {
    Fixed(f64),
    Layer(usize),
}

impl CostCoefficients {
    /// Searchable layers only.
    pub fn new(per_layer: Vec<Vec<f64>>) -> Self {
        Self { per_layer, fixed: vec![] }
    }

    /// Sum of the fixed-layer costs.
    pub fn constant(&self) -> f64 {
        self.fixed.iter().map(|&(_, c)| c).sum()
    }

    fn terms(&self) -> Vec<Term> {
        let mut out = Vec::with_capacity(self.per_layer.len() + self.fixed.len());
        let mut f = self.fixed.iter().peekable();
        for l in 0..=self.per_layer.len() {
            while let Some(&&(pos, c)) = f.peek() {
                if pos > l {
                    break;
                }
                out.push(Term::Fixed(c));
                f.next();
            }
            if l < self.per_layer.len() {
                out.push(Term::Layer(l));
            }
        }
        out.extend(f.map(|&(_, c)| Term::Fixed(c)));
        out
    }

    /// Cost of one concrete selection, summed in network order.
    pub fn hard(&self, indices: &[usize]) -> Result<f64> {
        if indices.len() != self.per_layer.len() {
            return Err(Error::InvalidArchitecture(format!(
                "{} selections for {} searchable layers",
                indices.len(),
                self.per_layer.len()
            )));
        }
        let mut total = 0.0;
        for t in self.terms() {
            total += match t {
                Term::Fixed(c) => c,
                Term::Layer(l) => *self.per_layer[l].get(indices[l]).ok_or_else(|| {
                    Error::InvalidArchitecture(format!(
                        "layer {l}: index {} out of {} candidates",
                        indices[l],
                        self.per_layer[l].len()
                    ))
                })?,
            };
        }
        Ok(total)
    }

    /// Expected cost under plain probability vectors.
    pub fn expected(&self, probs: &[Vec<f64>]) -> f64 {
        let mut total = 0.0;
        for t in self.terms() {
            total += match t {
                Term::Fixed(c) => c,
                Term::Layer(l) => probs[l].iter().zip(&self.per_layer[l]).map(|(a, b)| a * b).sum::<f64>(),
            };
        }
        total
    }
}

fn check_mask(tape: &Tape, m: Var, c: &[f64], l: usize) -> Result<()> {
    let mv = tape.value(m);
    if mv.numel() != c.len() {
        return Err(Error::ShapeMismatch {
            op: "mask_weighted_sum",
            lhs: mv.shape().to_vec(),
            rhs: vec![c.len()],
        });
    }
    let s: f64 = mv.data().iter().sum();
    if (s - 1.0).abs() > SIMPLEX_TOLERANCE || mv.data().iter().any(|&p| p < 0.0) {
        return Err(Error::Domain(format!("mask of layer {l} is not on the simplex (sum {s})")));
    }
    Ok(())
}

fn mask_dot(tape: &mut Tape, m: Var, c: &[f64]) -> Result<Var> {
    let shape = tape.value(m).shape().to_vec();
    let cv = tape.constant(Tensor::new(shape, c.to_vec())?);
    let prod = tape.mul(m, cv)?;
    tape.sum(prod)
}

fn check_count(masks: &[Var], rows: usize) -> Result<()> {
    if masks.len() != rows {
        return Err(Error::InvalidArchitecture(format!("{} masks for {rows} coefficient rows", masks.len())));
    }
    Ok(())
}

/// `Σ_l Σ_i m_{l,i}·c_{l,i}` on the tape. Masks must lie on the simplex.
pub fn mask_weighted_sum(tape: &mut Tape, masks: &[Var], coeffs: &[Vec<f64>]) -> Result<Var> {
    expected_cost(tape, masks, &CostCoefficients::new(coeffs.to_vec()))
}

/// Fixed costs plus mask-weighted candidate costs, summed in network
/// order on the tape.
pub fn expected_cost(tape: &mut Tape, masks: &[Var], coeffs: &CostCoefficients) -> Result<Var> {
    check_count(masks, coeffs.per_layer.len())?;
    for (l, (&m, c)) in masks.iter().zip(&coeffs.per_layer).enumerate() {
        check_mask(tape, m, c, l)?;
    }
    let mut total: Option<Var> = None;
    for t in coeffs.terms() {
        let v = match t {
            Term::Fixed(c) => tape.constant(Tensor::scalar(c)),
            Term::Layer(l) => mask_dot(tape, masks[l], &coeffs.per_layer[l])?,
        };
        total = Some(match total {
            None => v,
            Some(acc) => tape.add(acc, v)?,
        });
    }
    Ok(total.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0))))
}

/// `β·(ln cost)^γ`.
pub fn cost_weighting(cost: f64, beta: f64, gamma: f64) -> Result<f64> {
    if !(cost > 1.0) {
        return Err(Error::Domain(format!("cost must exceed 1, got {cost}")));
    }
    if !(beta > 0.0) || !(gamma >= 0.0) {
        return Err(Error::Domain(format!("need beta > 0 and gamma >= 0, got {beta}, {gamma}")));
    }
    Ok(beta * cost.ln().powf(gamma))
}
