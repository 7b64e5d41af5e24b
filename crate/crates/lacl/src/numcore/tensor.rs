use serde::{Deserialize, Serialize};

use super::{NumError, EPS_NORM};

/// Row-major f64 tensor. Entries are finite after every public operation;
/// constructors reject NaN/Inf up front.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NumError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(NumError::shape(
                "Tensor::new",
                format!("shape {:?} wants {} entries, got {}", shape, numel, data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(NumError::NonFinite("Tensor::new"));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    /// 2-D tensor from equally sized rows. Test and construction convenience.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumError> {
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(NumError::shape("Tensor::from_rows", "ragged rows".to_string()));
        }
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Tensor::new(vec![rows.len(), ncols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Value of a single-element tensor. Panics otherwise; callers that cannot
    /// guarantee the shape must check `numel` first.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows of a 2-D tensor.
    pub fn nrows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "nrows on shape {:?}", self.shape);
        self.shape[0]
    }

    /// Columns of a 2-D tensor.
    pub fn ncols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "ncols on shape {:?}", self.shape);
        self.shape[1]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let n = self.ncols();
        &self.data[r * n..(r + 1) * n]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Mean over the row axis of a `[len, d]` matrix. The token-pooling primitive:
/// scaling the result by `len` recovers the column sums.
pub fn mean_pool(h: &Tensor) -> Result<Tensor, NumError> {
    if h.shape().len() != 2 {
        return Err(NumError::shape("mean_pool", format!("want 2-D, got {:?}", h.shape())));
    }
    let (len, d) = (h.nrows(), h.ncols());
    if len == 0 {
        return Err(NumError::EmptySequence);
    }
    let mut out = vec![0.0; d];
    for t in 0..len {
        for (o, v) in out.iter_mut().zip(h.row(t)) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= len as f64;
    }
    Ok(Tensor::vector(out))
}

/// Scale a vector to unit L2 norm. Direction is preserved.
pub fn l2_normalize(v: &Tensor) -> Result<Tensor, NumError> {
    if v.shape().len() != 1 {
        return Err(NumError::shape("l2_normalize", format!("want 1-D, got {:?}", v.shape())));
    }
    let n = l2_norm(v.data());
    if n <= EPS_NORM {
        return Err(NumError::DegenerateVector);
    }
    Ok(Tensor::vector(v.data().iter().map(|x| x / n).collect()))
}

/// Cosine similarity over raw slices; shared guard for every cosine in the
/// crate.
pub fn cosine_between(a: &[f64], b: &[f64]) -> Result<f64, NumError> {
    if a.len() != b.len() {
        return Err(NumError::shape(
            "cosine_between",
            format!("lengths {} vs {}", a.len(), b.len()),
        ));
    }
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na <= EPS_NORM || nb <= EPS_NORM {
        return Err(NumError::DegenerateVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<f64, NumError> {
    if a.shape().len() != 1 || b.shape().len() != 1 {
        return Err(NumError::shape(
            "cosine_similarity",
            format!("want 1-D args, got {:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    cosine_between(a.data(), b.data())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_pool_two_rows() {
        let h = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(mean_pool(&h).unwrap().data(), &[2.0, 3.0]);
    }

    #[test]
    fn mean_pool_single_row_is_identity() {
        let h = Tensor::from_rows(&[vec![5.0, 5.0]]).unwrap();
        assert_eq!(mean_pool(&h).unwrap().data(), &[5.0, 5.0]);
    }

    #[test]
    fn mean_pool_three_rows() {
        let h = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 2.0]]).unwrap();
        assert_eq!(mean_pool(&h).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn mean_pool_empty_errors() {
        let h = Tensor::new(vec![0, 3], vec![]).unwrap();
        let err = mean_pool(&h).unwrap_err();
        assert!(err.to_string().contains("empty-sequence"), "{err}");
    }

    // Exact form of the scale-back identity: with power-of-two lengths and
    // dyadic entries every intermediate rounds to itself, so mean * len must
    // reproduce the column sums bit for bit.
    #[test]
    fn mean_pool_times_len_recovers_column_sums() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let len = [1usize, 2, 4, 8, 16][rng.gen_range(0..5)];
            let d = rng.gen_range(1..6);
            let rows: Vec<Vec<f64>> = (0..len)
                .map(|_| (0..d).map(|_| rng.gen_range(-16i32..=16) as f64 * 0.5).collect())
                .collect();
            let h = Tensor::from_rows(&rows).unwrap();
            let pooled = mean_pool(&h).unwrap();
            for c in 0..d {
                let col_sum: f64 = rows.iter().map(|r| r[c]).sum();
                assert_eq!(pooled.data()[c] * len as f64, col_sum);
            }
        }
    }

    // Arbitrary lengths: the same identity up to one rounding in the divide
    // and one in the scale-back.
    #[test]
    fn mean_pool_times_len_near_exact_any_len() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        for _ in 0..200 {
            let len = rng.gen_range(1..12);
            let d = rng.gen_range(1..5);
            let rows: Vec<Vec<f64>> =
                (0..len).map(|_| (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
            let h = Tensor::from_rows(&rows).unwrap();
            let pooled = mean_pool(&h).unwrap();
            for c in 0..d {
                let col_sum: f64 = rows.iter().map(|r| r[c]).sum();
                let back = pooled.data()[c] * len as f64;
                assert!((back - col_sum).abs() <= 1e-12 * col_sum.abs().max(1.0));
            }
        }
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let v = Tensor::vector(vec![3.0, 4.0]);
        let u = l2_normalize(&v).unwrap();
        assert!((u.data()[0] - 0.6).abs() < 1e-15);
        assert!((u.data()[1] - 0.8).abs() < 1e-15);
        assert!((l2_norm(u.data()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn l2_normalize_unit_unchanged() {
        let u = l2_normalize(&Tensor::vector(vec![1.0, 0.0])).unwrap();
        assert_eq!(u.data(), &[1.0, 0.0]);
    }

    #[test]
    fn l2_normalize_zero_errors() {
        let err = l2_normalize(&Tensor::vector(vec![0.0, 0.0])).unwrap_err();
        assert!(err.to_string().contains("degenerate-vector"), "{err}");
    }

    #[test]
    fn cosine_orthogonal() {
        let a = Tensor::vector(vec![1.0, 0.0]);
        let b = Tensor::vector(vec![0.0, 1.0]);
        assert_eq!(cosine_similarity(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn cosine_self_is_one() {
        let a = Tensor::vector(vec![2.0, 2.0]);
        assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_forty_five_degrees() {
        let a = Tensor::vector(vec![1.0, 0.0]);
        let b = Tensor::vector(vec![1.0, 1.0]);
        let c = cosine_similarity(&a, &b).unwrap();
        assert!((c - 0.70710678).abs() < 1e-8, "{c}");
    }

    #[test]
    fn cosine_zero_norm_errors() {
        let a = Tensor::vector(vec![0.0, 0.0]);
        let b = Tensor::vector(vec![1.0, 0.0]);
        assert!(cosine_similarity(&a, &b).is_err());
    }

    #[test]
    fn cosine_positive_scaling_and_range() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let d = rng.gen_range(1..8);
            let a: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let b: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            if l2_norm(&a) <= 1e-6 || l2_norm(&b) <= 1e-6 {
                continue;
            }
            let c = cosine_between(&a, &b).unwrap();
            assert!((-1.0..=1.0).contains(&c));
            let lambda = rng.gen_range(0.1..10.0);
            let scaled: Vec<f64> = a.iter().map(|x| x * lambda).collect();
            let cs = cosine_between(&scaled, &a).unwrap();
            assert!((cs - 1.0).abs() < 1e-12, "cos(a, lambda a) = {cs}");
        }
    }

    #[test]
    fn constructors_reject_non_finite() {
        assert!(Tensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(vec![2], vec![1.0, f64::INFINITY]).is_err());
        assert!(Tensor::new(vec![3], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn operations_are_bitwise_deterministic() {
        let h = Tensor::from_rows(&[
            vec![0.1, 0.7, -0.3],
            vec![1.5, -2.2, 0.9],
            vec![0.33, 0.44, 0.55],
        ])
        .unwrap();
        let a = mean_pool(&h).unwrap();
        let b = mean_pool(&h).unwrap();
        assert_eq!(a.data(), b.data());
        let u = l2_normalize(&a).unwrap();
        let v = l2_normalize(&b).unwrap();
        assert_eq!(u.data(), v.data());
    }
}
