use crate::error::{Error, Result};
use crate::model::GlobalDescriptor;
use crate::tensor::{Real, Tape, Tensor, Var};

/// Both forms of the loss: `raw` may be negative, `clamped = max(0, raw)`.
pub struct TripletTerms<'t, T: Real> {
    pub raw: Var<'t, T>,
    pub clamped: Var<'t, T>,
}

/// `k_p * (alpha + max_p d(q, p)) - sum_n d(q, n)` with `d` the squared
/// Euclidean distance, and its clamp at zero.
pub fn lazy_triplet_terms<'t, T: Real>(
    query: Var<'t, T>,
    positives: &[Var<'t, T>],
    negatives: &[Var<'t, T>],
    alpha: T,
) -> Result<TripletTerms<'t, T>> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::invalid(
            "lazy_triplet_loss",
            "needs at least one positive and one negative",
        ));
    }
    let dist = |others: &[Var<'t, T>]| -> Result<Vec<Var<'t, T>>> {
        others
            .iter()
            .map(|&o| query.squared_distance(o)?.reshape(&[1]))
            .collect()
    };
    let hardest = Var::concat(&dist(positives)?, 0)?.max(0)?;
    let neg_sum = Var::concat(&dist(negatives)?, 0)?.sum_all();
    let k_p = T::from_usize(positives.len()).expect("small count");
    let raw = hardest.add_scalar(alpha).scale(k_p).sub(neg_sum)?;
    Ok(TripletTerms {
        raw,
        clamped: raw.relu(),
    })
}

/// Loss values for plain descriptors, as `(raw, clamped)`.
pub fn lazy_triplet_loss(
    query: &GlobalDescriptor,
    positives: &[GlobalDescriptor],
    negatives: &[GlobalDescriptor],
    alpha: f64,
) -> Result<(f64, f64)> {
    let tape = Tape::<f64>::inference();
    let var = |d: &GlobalDescriptor| {
        let data: Vec<f64> = d.values.iter().map(|&v| f64::from(v)).collect();
        Tensor::new(&[data.len()], data).map(|t| tape.constant(t))
    };
    let q = var(query)?;
    let ps = positives.iter().map(var).collect::<Result<Vec<_>>>()?;
    let ns = negatives.iter().map(var).collect::<Result<Vec<_>>>()?;
    for d in ps.iter().chain(&ns) {
        if d.shape() != q.shape() {
            return Err(Error::Shape {
                op: "lazy_triplet_loss",
                lhs: q.shape(),
                rhs: d.shape(),
            });
        }
    }
    let terms = lazy_triplet_terms(q, &ps, &ns, alpha)?;
    Ok((
        terms.raw.item().expect("scalar"),
        terms.clamped.item().expect("scalar"),
    ))
}
