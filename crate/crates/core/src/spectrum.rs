//! DFT spectra of control trajectories and linear frequency constraints.
//!
//! Bin convention: bin `j ∈ 1..N` of an N-stage channel carries the
//! frequency `2π(j−1)/N` rad/sample; the DFT is unitary (1/√N scaling).
//! Forbidding bin `j` of channel `k` adds to the affine equality
//! `Σ_t F_t u_t = 0` the rows `Re(D_j)`, `Im(D_j)` acting on channel `k`,
//! with the imaginary row omitted for the purely real bins (DC, and
//! Nyquist for even N). Dependent rows arising from conjugate-symmetric
//! bin pairs are removed by a rank-revealing factorization.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use num_complex::Complex64;

use crate::dynamics::ControlTrajectory;
use crate::error::Error;

/// Per-channel forbidden-bin request. Channels and bins are 1-based,
/// matching the bin ↔ frequency convention above.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForbiddenBinSpec {
    pub channel: usize,
    pub bins: Vec<usize>,
}

impl ForbiddenBinSpec {
    pub fn new(channel: usize, bins: Vec<usize>) -> Self {
        ForbiddenBinSpec { channel, bins }
    }

    /// All bins whose frequency lies strictly inside `(low, high)`
    /// rad/sample.
    pub fn band(channel: usize, n_stages: usize, low: f64, high: f64) -> Self {
        ForbiddenBinSpec {
            channel,
            bins: bins_in_band(n_stages, low, high),
        }
    }
}

/// Bins `j` with `2π(j−1)/N` strictly inside `(low, high)`.
pub fn bins_in_band(n_stages: usize, low: f64, high: f64) -> Vec<usize> {
    let n = n_stages as f64;
    (1..=n_stages)
        .filter(|&j| {
            let freq = 2.0 * std::f64::consts::PI * ((j - 1) as f64) / n;
            freq > low && freq < high
        })
        .collect()
}

/// Which part of a complex DFT row a constraint row came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinPart {
    Re,
    Im,
}

/// Provenance of one retained constraint row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConstraintRow {
    pub channel: usize,
    pub bin: usize,
    pub part: BinPart,
}

/// The stage matrices `F_t` of the frequency equality `Σ_t F_t u_t = 0`,
/// stored stacked as an ℓ × (N·m) matrix over the stage-major flattened
/// control, together with the bookkeeping that produced them.
///
/// Immutable after construction; the stacked map has full row rank ℓ.
#[derive(Debug, Clone)]
pub struct FrequencyConstraintSet {
    n_stages: usize,
    n_channels: usize,
    stacked: DMatrix<f64>,
    rows: Vec<ConstraintRow>,
    dc_forbidden_channels: Vec<usize>,
    gram_chol: Option<Cholesky<f64, Dyn>>,
}

/// The unitary DFT matrix: entry `(r, c) = ω^{rc}/√N` (0-based indices)
/// with `ω = exp(−i2π/N)`.
pub fn dft_matrix(n: usize) -> DMatrix<Complex64> {
    assert!(n >= 1, "DFT size must be positive");
    let scale = 1.0 / (n as f64).sqrt();
    DMatrix::from_fn(n, n, |r, c| {
        let phase = -2.0 * std::f64::consts::PI * (((r * c) % n) as f64) / (n as f64);
        Complex64::from_polar(scale, phase)
    })
}

/// Per-channel DFT of a control trajectory: channel `k` maps to
/// `D · u^(k)`, a complex vector of length N.
pub fn spectrum(u: &ControlTrajectory) -> Vec<DVector<Complex64>> {
    let n = u.stages();
    let d = dft_matrix(n);
    (0..u.channels())
        .map(|k| {
            let channel = u.channel(k).map(|x| Complex64::new(x, 0.0));
            &d * channel
        })
        .collect()
}

impl FrequencyConstraintSet {
    /// An empty set (no frequency constraints) for the given dimensions.
    pub fn unconstrained(n_stages: usize, n_channels: usize) -> Self {
        FrequencyConstraintSet {
            n_stages,
            n_channels,
            stacked: DMatrix::zeros(0, n_stages * n_channels),
            rows: Vec::new(),
            dc_forbidden_channels: Vec::new(),
            gram_chol: None,
        }
    }

    pub fn n_stages(&self) -> usize {
        self.n_stages
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    /// Number ℓ of independent real constraint rows.
    pub fn num_constraints(&self) -> usize {
        self.stacked.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.stacked.nrows() == 0
    }

    /// Channels (1-based) whose DC bin is forbidden; flagged because this
    /// forces zero-mean control on that channel.
    pub fn dc_forbidden_channels(&self) -> &[usize] {
        &self.dc_forbidden_channels
    }

    pub fn rows(&self) -> &[ConstraintRow] {
        &self.rows
    }

    /// The stage matrix `F_t` (ℓ × m).
    pub fn stage_matrix(&self, t: usize) -> DMatrix<f64> {
        self.stacked
            .columns(t * self.n_channels, self.n_channels)
            .into_owned()
    }

    /// `F_t u_t` for one stage.
    pub fn apply_stage(&self, t: usize, u_t: &DVector<f64>) -> DVector<f64> {
        self.stacked.columns(t * self.n_channels, self.n_channels) * u_t
    }

    /// `F_tᵀ y`, the stage-t control-space image of a constraint covector.
    pub fn stage_transpose_apply(&self, t: usize, y: &DVector<f64>) -> DVector<f64> {
        self.stacked
            .columns(t * self.n_channels, self.n_channels)
            .transpose()
            * y
    }

    /// Evaluates `Σ_t F_t u_t` as the running sum
    /// `w_{t+1} = w_t + F_t u_t` from `w_0 = 0`, in ascending stage order;
    /// this is the documented summation order for the constraint value.
    pub fn apply(&self, u: &ControlTrajectory) -> DVector<f64> {
        let mut w = DVector::zeros(self.num_constraints());
        for t in 0..self.n_stages {
            w += self.apply_stage(t, &u.stage(t));
        }
        w
    }

    /// Largest forbidden-bin magnitude of the trajectory's spectrum.
    pub fn max_forbidden_magnitude(&self, u: &ControlTrajectory) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let spectra = spectrum(u);
        self.rows
            .iter()
            .map(|row| spectra[row.channel - 1][row.bin - 1].norm())
            .fold(0.0_f64, f64::max)
    }
}

/// Builds the constraint set from a list of forbidden-bin requests.
///
/// An empty request list yields the ℓ = 0 set (flagged by `is_empty`, not
/// an error). Duplicate and conjugate-dependent rows are removed by QR
/// with column pivoting at tolerance 1e-10.
pub fn build_constraints(
    n_stages: usize,
    n_channels: usize,
    specs: &[ForbiddenBinSpec],
) -> Result<FrequencyConstraintSet, Error> {
    let mut dc_forbidden = Vec::new();
    let mut raw_rows: Vec<(ConstraintRow, DVector<f64>)> = Vec::new();
    let d = dft_matrix(n_stages);
    let nm = n_stages * n_channels;

    for spec in specs {
        if spec.channel == 0 || spec.channel > n_channels {
            return Err(Error::DimensionMismatch {
                context: format!("channel {} out of range 1..={}", spec.channel, n_channels),
            });
        }
        for &bin in &spec.bins {
            if bin == 0 || bin > n_stages {
                return Err(Error::DimensionMismatch {
                    context: format!("bin {} out of range 1..={}", bin, n_stages),
                });
            }
            if bin == 1 && !dc_forbidden.contains(&spec.channel) {
                dc_forbidden.push(spec.channel);
            }
            let real_only = bin == 1 || (n_stages % 2 == 0 && bin == n_stages / 2 + 1);
            let mut re_row = DVector::zeros(nm);
            let mut im_row = DVector::zeros(nm);
            for t in 0..n_stages {
                let entry = d[(bin - 1, t)];
                re_row[t * n_channels + (spec.channel - 1)] = entry.re;
                im_row[t * n_channels + (spec.channel - 1)] = entry.im;
            }
            raw_rows.push((
                ConstraintRow {
                    channel: spec.channel,
                    bin,
                    part: BinPart::Re,
                },
                re_row,
            ));
            if !real_only {
                raw_rows.push((
                    ConstraintRow {
                        channel: spec.channel,
                        bin,
                        part: BinPart::Im,
                    },
                    im_row,
                ));
            }
        }
    }

    if raw_rows.is_empty() {
        return Ok(FrequencyConstraintSet::unconstrained(n_stages, n_channels));
    }

    let keep = independent_row_indices(&raw_rows, 1e-10);
    let mut rows = Vec::with_capacity(keep.len());
    let mut stacked = DMatrix::zeros(keep.len(), nm);
    for (out, &idx) in keep.iter().enumerate() {
        rows.push(raw_rows[idx].0.clone());
        stacked.set_row(out, &raw_rows[idx].1.transpose());
    }

    let gram = &stacked * stacked.transpose();
    let gram_chol = Cholesky::new(gram).ok_or(Error::RankDeficientF)?;

    Ok(FrequencyConstraintSet {
        n_stages,
        n_channels,
        stacked,
        rows,
        dc_forbidden_channels: dc_forbidden,
        gram_chol: Some(gram_chol),
    })
}

/// Selects a maximal independent subset of rows via QR with column
/// pivoting on the transposed row stack; returns original indices in
/// ascending order so provenance stays in emission order.
fn independent_row_indices(raw_rows: &[(ConstraintRow, DVector<f64>)], tol: f64) -> Vec<usize> {
    let nm = raw_rows[0].1.len();
    let mut cols = DMatrix::zeros(nm, raw_rows.len());
    for (i, (_, row)) in raw_rows.iter().enumerate() {
        cols.set_column(i, row);
    }
    let qr = cols.col_piv_qr();
    let r = qr.r();
    let diag_max = (0..r.nrows().min(r.ncols()))
        .map(|i| r[(i, i)].abs())
        .fold(0.0_f64, f64::max)
        .max(1.0);
    let rank = (0..r.nrows().min(r.ncols()))
        .take_while(|&i| r[(i, i)].abs() > tol * diag_max)
        .count();

    // Recover the pivot order by permuting an index row the same way the
    // factorization permuted the columns.
    let mut index_row = DMatrix::from_fn(1, raw_rows.len(), |_, c| c as f64);
    qr.p().permute_columns(&mut index_row);
    let mut keep: Vec<usize> = (0..rank).map(|i| index_row[(0, i)] as usize).collect();
    keep.sort_unstable();
    keep
}

/// Euclidean projection of a control trajectory onto the nullspace
/// `{u : Σ_t F_t u_t = 0}`: `u − 𝔉ᵀ(𝔉𝔉ᵀ)⁻¹ 𝔉 u`. Linear and idempotent.
pub fn project_onto_nullspace(
    u: &ControlTrajectory,
    constraints: &FrequencyConstraintSet,
) -> ControlTrajectory {
    let Some(chol) = &constraints.gram_chol else {
        return u.clone();
    };
    let flat = u.flatten();
    let residual = &constraints.stacked * &flat;
    let multiplier = chol.solve(&residual);
    let corrected = flat - constraints.stacked.transpose() * multiplier;
    ControlTrajectory::from_flat(constraints.n_channels, constraints.n_stages, &corrected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn dft_of_size_one_is_unity() {
        let d = dft_matrix(1);
        assert_eq!(d[(0, 0)], Complex64::new(1.0, 0.0));
    }

    #[test]
    fn dft_size_four_second_row() {
        let d = dft_matrix(4);
        let expected = [
            Complex64::new(0.5, 0.0),
            Complex64::new(0.0, -0.5),
            Complex64::new(-0.5, 0.0),
            Complex64::new(0.0, 0.5),
        ];
        for (c, e) in expected.iter().enumerate() {
            assert!((d[(1, c)] - e).norm() <= 1e-15);
        }
    }

    #[test]
    fn dft_is_unitary() {
        let d = dft_matrix(8);
        let product = &d * d.adjoint();
        for r in 0..8 {
            for c in 0..8 {
                let expected = if r == c { 1.0 } else { 0.0 };
                assert!((product[(r, c)] - Complex64::new(expected, 0.0)).norm() <= 1e-13);
            }
        }
    }

    #[test]
    fn constant_signal_is_dc_only() {
        let c = 1.7;
        let u = ControlTrajectory::from_matrix(DMatrix::from_element(1, 8, c));
        let s = &spectrum(&u)[0];
        assert!((s[0] - Complex64::new(c * 8.0_f64.sqrt(), 0.0)).norm() <= 1e-12);
        for j in 1..8 {
            assert!(s[j].norm() <= 1e-12);
        }
    }

    #[test]
    fn cosine_lands_in_conjugate_bins() {
        let n = 8;
        let u = ControlTrajectory::from_matrix(DMatrix::from_fn(1, n, |_, t| {
            (2.0 * std::f64::consts::PI * t as f64 / n as f64).cos()
        }));
        let s = &spectrum(&u)[0];
        let expected = 8.0_f64.sqrt() / 2.0;
        assert!((s[1].norm() - expected).abs() <= 1e-12);
        assert!((s[7].norm() - expected).abs() <= 1e-12);
        for j in [0usize, 2, 3, 4, 5, 6] {
            assert!(s[j].norm() <= 1e-12);
        }
    }

    #[test]
    fn zero_signal_zero_spectrum() {
        let u = ControlTrajectory::zeros(2, 16);
        for s in spectrum(&u) {
            assert!(s.iter().all(|z| z.norm() == 0.0));
        }
    }

    #[test]
    fn parseval_holds() {
        let mut rng = StdRng::seed_from_u64(2);
        let u = ControlTrajectory::from_matrix(DMatrix::from_fn(3, 33, |_, _| {
            rng.gen_range(-5.0..5.0)
        }));
        let spectra = spectrum(&u);
        for k in 0..3 {
            let time_norm = u.channel(k).norm();
            let freq_norm = spectra[k].norm();
            assert!((time_norm - freq_norm).abs() <= 1e-10);
        }
    }

    #[test]
    fn self_conjugate_bin_yields_single_row() {
        // N=4, bin 3 has frequency π: the DFT row is real, so a single row.
        let c = build_constraints(4, 1, &[ForbiddenBinSpec::new(1, vec![3])]).unwrap();
        assert_eq!(c.num_constraints(), 1);
        let expected = [0.5, -0.5, 0.5, -0.5];
        for t in 0..4 {
            assert!((c.stage_matrix(t)[(0, 0)] - expected[t]).abs() <= 1e-15);
        }
    }

    #[test]
    fn generic_bin_yields_re_and_im_rows() {
        let c = build_constraints(4, 1, &[ForbiddenBinSpec::new(1, vec![2])]).unwrap();
        assert_eq!(c.num_constraints(), 2);
        assert_eq!(c.rows()[0].part, BinPart::Re);
        assert_eq!(c.rows()[1].part, BinPart::Im);
    }

    #[test]
    fn conjugate_pair_listed_twice_is_deduplicated() {
        // Bins 2 and 4 of N=4 are conjugate; listing both must not raise ℓ
        // beyond the rank of a single pair.
        let both = build_constraints(4, 1, &[ForbiddenBinSpec::new(1, vec![2, 4])]).unwrap();
        assert_eq!(both.num_constraints(), 2);
    }

    #[test]
    fn empty_spec_is_flagged_not_an_error() {
        let c = build_constraints(16, 3, &[]).unwrap();
        assert!(c.is_empty());
        assert_eq!(c.num_constraints(), 0);
    }

    #[test]
    fn dc_forbidding_is_flagged() {
        let c = build_constraints(8, 2, &[ForbiddenBinSpec::new(2, vec![1])]).unwrap();
        assert_eq!(c.dc_forbidden_channels(), &[2]);
    }

    #[test]
    fn out_of_range_inputs_are_rejected() {
        assert!(build_constraints(8, 2, &[ForbiddenBinSpec::new(3, vec![1])]).is_err());
        assert!(build_constraints(8, 2, &[ForbiddenBinSpec::new(1, vec![9])]).is_err());
    }

    #[test]
    fn benchmark_band_constraints_count_and_nulling() {
        // N = 130, band (2π/3, 4π/3) forbidden on channels 1 and 3: 43 bins
        // per channel (21 conjugate pairs + the Nyquist bin), each pair
        // contributing two independent rows.
        let n = 130;
        let lo = 2.0 * std::f64::consts::PI / 3.0;
        let hi = 4.0 * std::f64::consts::PI / 3.0;
        let specs = [
            ForbiddenBinSpec::band(1, n, lo, hi),
            ForbiddenBinSpec::band(3, n, lo, hi),
        ];
        assert_eq!(specs[0].bins.len(), 43);
        let c = build_constraints(n, 3, &specs).unwrap();
        assert_eq!(c.num_constraints(), 86);

        let mut rng = StdRng::seed_from_u64(10);
        let u = ControlTrajectory::from_matrix(DMatrix::from_fn(3, n, |_, _| {
            rng.gen_range(-20.0..20.0)
        }));
        let projected = project_onto_nullspace(&u, &c);
        let max_mag = c.max_forbidden_magnitude(&projected);
        assert!(max_mag <= 1e-10 * projected.max_abs().max(1.0));

        // Channel 2 is untouched by the projection.
        assert!((projected.channel(1) - u.channel(1)).amax() <= 1e-12);
    }

    #[test]
    fn projection_is_idempotent_and_fixes_feasible_points() {
        let c = build_constraints(12, 2, &[ForbiddenBinSpec::new(1, vec![3, 5])]).unwrap();
        let mut rng = StdRng::seed_from_u64(4);
        let u = ControlTrajectory::from_matrix(DMatrix::from_fn(2, 12, |_, _| {
            rng.gen_range(-1.0..1.0)
        }));
        let p1 = project_onto_nullspace(&u, &c);
        let p2 = project_onto_nullspace(&p1, &c);
        assert!((p2.as_matrix() - p1.as_matrix()).amax() <= 1e-12);
    }

    #[test]
    fn dc_projection_subtracts_channel_mean() {
        let c = build_constraints(4, 1, &[ForbiddenBinSpec::new(1, vec![1])]).unwrap();
        let u =
            ControlTrajectory::from_matrix(DMatrix::from_row_slice(1, 4, &[1.0, 2.0, 3.0, 6.0]));
        let p = project_onto_nullspace(&u, &c);
        let mean = 3.0;
        for t in 0..4 {
            assert!((p.stage(t)[0] - (u.stage(t)[0] - mean)).abs() <= 1e-12);
        }
    }

    #[test]
    fn running_sum_is_the_constraint_evaluation() {
        // The documented evaluation order: w_{t+1} = w_t + F_t u_t. A
        // re-computation in that exact order must agree bit-for-bit.
        let c = build_constraints(10, 2, &[ForbiddenBinSpec::new(2, vec![2, 4])]).unwrap();
        let mut rng = StdRng::seed_from_u64(77);
        let u = ControlTrajectory::from_matrix(DMatrix::from_fn(2, 10, |_, _| {
            rng.gen_range(-3.0..3.0)
        }));
        let mut w = DVector::zeros(c.num_constraints());
        for t in 0..10 {
            w += c.apply_stage(t, &u.stage(t));
        }
        assert_eq!(w, c.apply(&u));
    }

    proptest! {
        #[test]
        fn real_signals_have_conjugate_symmetric_spectra(seed in 0u64..500) {
            let mut rng = StdRng::seed_from_u64(seed);
            let n = rng.gen_range(2usize..24);
            let u = ControlTrajectory::from_matrix(DMatrix::from_fn(1, n, |_, _| {
                rng.gen_range(-10.0..10.0)
            }));
            let s = &spectrum(&u)[0];
            for j in 2..=n {
                let mirror = n + 2 - j;
                let diff = (s[j - 1].conj() - s[mirror - 1]).norm();
                prop_assert!(diff <= 1e-12 * u.max_abs().max(1.0));
            }
        }

        #[test]
        fn projection_nulls_forbidden_bins(seed in 0u64..200) {
            let mut rng = StdRng::seed_from_u64(seed);
            let n = rng.gen_range(4usize..32);
            let m = rng.gen_range(1usize..4);
            let channel = rng.gen_range(1..=m);
            let n_bins = rng.gen_range(1usize..=n.min(5));
            let bins: Vec<usize> = (0..n_bins).map(|_| rng.gen_range(1..=n)).collect();
            let c = build_constraints(n, m, &[ForbiddenBinSpec::new(channel, bins)]).unwrap();
            let u = ControlTrajectory::from_matrix(DMatrix::from_fn(m, n, |_, _| {
                rng.gen_range(-50.0..50.0)
            }));
            let p = project_onto_nullspace(&u, &c);
            let bound = 1e-10 * u.max_abs().max(1.0);
            prop_assert!(c.max_forbidden_magnitude(&p) <= bound);
        }
    }
}
