//! Attention masks that realize lattice actions.
//!
//! Three independent routes produce the same binary mask for a primitive
//! action:
//!
//! * [`mask_from_shift`] places a single 1 per row using the per-row offset
//!   vector of [`shift_vector`];
//! * [`mask_via_fourier`] shifts every row of the identity in the frequency
//!   domain (phase ramp) and transforms back;
//! * [`KernelBank::convolve_identity`] convolves each identity row with the
//!   frozen kernel returned by [`conv_kernels_for`].
//!
//! Masks on higher-rank lattices are Kronecker products of per-dimension (or
//! square 2-D) masks, and composition of actions is the matrix product of
//! their masks, the later action on the left.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dft::Dft;
use crate::error::{Error, Result};
use crate::lattice::{LatticeAction, LatticeShape, ReflectAxis, ScaleDirection};
use crate::matrix::DenseMatrix;

/// Largest mask side [`kronecker_mask`] will build by default.
pub const DEFAULT_MAX_MASK_SIZE: usize = 4096;

const ROUND_THRESHOLD: f64 = 0.5;
const ROUND_GUARD: f64 = 0.1;
const MASK_TOLERANCE: f64 = 1e-9;

/// Per-row relative offsets: row `k` attends column `(k + o_k) mod n` (0-based).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShiftVector(pub Vec<i64>);

impl ShiftVector {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[i64] {
        &self.0
    }

    /// 0-based column attended by each row.
    pub fn attended_columns(&self) -> Vec<usize> {
        let n = self.0.len() as i64;
        self.0
            .iter()
            .enumerate()
            .map(|(k, &o)| (k as i64 + o).rem_euclid(n) as usize)
            .collect()
    }

    fn from_columns(columns: &[usize]) -> Self {
        Self(
            columns
                .iter()
                .enumerate()
                .map(|(k, &c)| c as i64 - k as i64)
                .collect(),
        )
    }
}

/// A real mask in `[0, 1]^{n_Q × n_K}` that rescales attention weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AttentionMask(DenseMatrix);

impl AttentionMask {
    /// Wraps `values`, rejecting non-finite entries and entries outside
    /// `[0, 1]` by more than a rounding tolerance (which is clamped away).
    pub fn new(mut values: DenseMatrix) -> Result<Self> {
        for (i, v) in values.as_mut_slice().iter_mut().enumerate() {
            if !v.is_finite() || *v < -MASK_TOLERANCE || *v > 1.0 + MASK_TOLERANCE {
                return Err(Error::NonFinite(format!(
                    "mask entry {i} = {v} is outside [0, 1]"
                )));
            }
            *v = v.clamp(0.0, 1.0);
        }
        Ok(Self(values))
    }

    pub fn identity(n: usize) -> Self {
        Self(DenseMatrix::identity(n))
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self(DenseMatrix::filled(rows, cols, 1.0))
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.0
    }

    pub fn into_matrix(self) -> DenseMatrix {
        self.0
    }

    pub fn size(&self) -> usize {
        self.0.rows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0.get(i, j)
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    /// True when every entry is 0 or 1 and each row holds exactly one 1.
    pub fn is_selection(&self) -> bool {
        (0..self.0.rows()).all(|i| {
            let row = self.0.row(i);
            row.iter().all(|&v| v == 0.0 || v == 1.0) && row.iter().filter(|&&v| v == 1.0).count() == 1
        })
    }

    /// True for a selection mask whose columns are also all hit exactly once.
    pub fn is_permutation(&self) -> bool {
        self.0.is_square() && self.is_selection() && self.transpose().is_selection()
    }

    /// Column holding the 1 of each row, if this is a selection mask.
    pub fn selected_columns(&self) -> Option<Vec<usize>> {
        if !self.is_selection() {
            return None;
        }
        Some(
            (0..self.0.rows())
                .map(|i| self.0.row(i).iter().position(|&v| v == 1.0).unwrap())
                .collect(),
        )
    }

    /// Recovers the shift vector of a square selection mask.
    pub fn to_shift_vector(&self) -> Option<ShiftVector> {
        if !self.0.is_square() {
            return None;
        }
        self.selected_columns()
            .map(|cols| ShiftVector::from_columns(&cols))
    }

    /// Keeps the first 1 of every row of a binary mask. Rows without any 1
    /// attend the last column.
    pub fn first_one_per_row(&self) -> Self {
        let (rows, cols) = self.0.shape();
        let mut out = DenseMatrix::zeros(rows, cols);
        for i in 0..rows {
            let j = self.0.row(i).iter().position(|&v| v >= ROUND_THRESHOLD);
            out.set(i, j.unwrap_or(cols - 1), 1.0);
        }
        Self(out)
    }
}

fn line_len(shape: &LatticeShape, what: &str) -> Result<usize> {
    if shape.rank() != 1 {
        return Err(Error::InvalidShape(format!(
            "{what} shift vectors are defined on 1-D lattices, got {shape}; use action_mask"
        )));
    }
    Ok(shape.n())
}

fn square_side(shape: &LatticeShape, what: &str) -> Result<usize> {
    if !shape.is_square() {
        return Err(Error::InvalidShape(format!(
            "{what} needs a square 2-D lattice, got {shape}"
        )));
    }
    Ok(shape.dims()[0])
}

/// Per-row offsets for a primitive action on a 1-D lattice (or a square 2-D
/// lattice for rotation and diagonal reflection).
pub fn shift_vector(action: &LatticeAction, shape: &LatticeShape) -> Result<ShiftVector> {
    let n = shape.n() as i64;
    match action {
        LatticeAction::Identity => Ok(ShiftVector::zeros(shape.n())),
        LatticeAction::Translate { delta } => {
            line_len(shape, "translation")?;
            let d = *delta
                .first()
                .ok_or_else(|| Error::InvalidShape("empty translation".into()))?;
            Ok(ShiftVector(vec![-d; n as usize]))
        }
        LatticeAction::Reflect {
            axis: ReflectAxis::Dims(dims),
        } => {
            line_len(shape, "reflection")?;
            action.validate(shape)?;
            if dims.is_empty() {
                return Ok(ShiftVector::zeros(n as usize));
            }
            // o_1 = n - 1, o_k = o_{k-1} - 2
            Ok(ShiftVector((0..n).map(|k| n - 1 - 2 * k).collect()))
        }
        LatticeAction::Reflect {
            axis: ReflectAxis::Diagonal,
        } => {
            let l = square_side(shape, "diagonal reflection")? as i64;
            Ok(ShiftVector(
                (0..n)
                    .map(|k| {
                        let (r, c) = (k / l, k % l);
                        (c * l + r) - k
                    })
                    .collect(),
            ))
        }
        LatticeAction::Rotate90 { quarter_turns } => {
            let l = square_side(shape, "rotation")? as i64;
            action.validate(shape)?;
            // one quarter turn, 1-based: o_k = k (l - 1) - floor((k - 1) / l)
            let offset = |k0: i64| {
                let k = k0 + 1;
                k * (l - 1) - (k - 1) / l
            };
            if *quarter_turns == 1 {
                return Ok(ShiftVector((0..n).map(offset).collect()));
            }
            let column = |k0: i64| (k0 + offset(k0)).rem_euclid(n);
            let columns: Vec<usize> = (0..n)
                .map(|k0| {
                    let mut c = k0;
                    for _ in 0..*quarter_turns {
                        c = column(c);
                    }
                    c as usize
                })
                .collect();
            Ok(ShiftVector::from_columns(&columns))
        }
        LatticeAction::Scale { factors, direction } => {
            line_len(shape, "scaling")?;
            let h = *factors
                .first()
                .ok_or_else(|| Error::InvalidShape("empty scaling".into()))?;
            if h < 2 {
                return Err(Error::InvalidFactor(h));
            }
            let h = h as i64;
            let kept = (n + h - 1) / h;
            Ok(ShiftVector(
                (0..n)
                    .map(|k| match direction {
                        // row k attends ceil(k / h), 1-based
                        ScaleDirection::Up => k / h - k,
                        ScaleDirection::Down if k < kept => k * h - k,
                        ScaleDirection::Down => (n - 1) - k,
                    })
                    .collect(),
            ))
        }
        LatticeAction::Compose { .. } => Err(Error::InvalidAction(
            "shift vectors are defined for primitive actions only".into(),
        )),
    }
}

/// Binary mask with a single 1 per row at column `(k + o_k) mod n`.
pub fn mask_from_shift(shift: &ShiftVector, n: usize) -> Result<AttentionMask> {
    if shift.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "shift vector of length {} for n = {n}",
            shift.len()
        )));
    }
    let mut m = DenseMatrix::zeros(n, n);
    for (k, c) in shift.attended_columns().into_iter().enumerate() {
        m.set(k, c, 1.0);
    }
    Ok(AttentionMask(m))
}

fn round_binary(values: &DenseMatrix) -> Result<DenseMatrix> {
    let mut out = DenseMatrix::zeros(values.rows(), values.cols());
    for i in 0..values.rows() {
        for j in 0..values.cols() {
            let v = values.get(i, j);
            if (v - ROUND_THRESHOLD).abs() < ROUND_GUARD || !v.is_finite() {
                return Err(Error::NumericalInstability {
                    row: i,
                    col: j,
                    value: v,
                });
            }
            if v > ROUND_THRESHOLD {
                out.set(i, j, 1.0);
            }
        }
    }
    Ok(out)
}

/// Builds the mask by transforming each row of the identity, multiplying by
/// the phase ramp `exp(-2πj o_k r / n)` and transforming back; real parts are
/// rounded at 0.5.
pub fn mask_via_fourier(shift: &ShiftVector, n: usize) -> Result<AttentionMask> {
    if shift.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "shift vector of length {} for n = {n}",
            shift.len()
        )));
    }
    let dft = Dft::new(n);
    let mut real = DenseMatrix::zeros(n, n);
    let zero = Complex64::new(0.0, 0.0);
    for (k, &o) in shift.as_slice().iter().enumerate() {
        let mut basis = vec![zero; n];
        basis[k] = Complex64::new(1.0, 0.0);
        let spectrum: Vec<Complex64> = dft
            .forward(&basis)
            .into_iter()
            .zip(dft.shift_phase(o))
            .map(|(a, b)| a * b)
            .collect();
        for (j, v) in dft.inverse(&spectrum).into_iter().enumerate() {
            real.set(k, j, v.re);
        }
    }
    round_binary(&real).map(AttentionMask)
}

/// Kronecker product `a ⊗ b` with the default size limit.
pub fn kronecker_mask(a: &AttentionMask, b: &AttentionMask) -> Result<AttentionMask> {
    kronecker_mask_with_limit(a, b, DEFAULT_MAX_MASK_SIZE)
}

pub fn kronecker_mask_with_limit(
    a: &AttentionMask,
    b: &AttentionMask,
    max_size: usize,
) -> Result<AttentionMask> {
    if !a.0.is_square() || !b.0.is_square() {
        return Err(Error::ShapeMismatch("kronecker_mask expects square masks".into()));
    }
    let requested = a.size() * b.size();
    if requested > max_size {
        return Err(Error::SizeOverflow {
            requested,
            max: max_size,
        });
    }
    Ok(AttentionMask(a.0.kron(&b.0)))
}

/// Matrix product `a · b`: the mask of "apply `b`'s action, then `a`'s".
pub fn compose_masks(a: &AttentionMask, b: &AttentionMask) -> Result<AttentionMask> {
    if !a.0.is_square() || !b.0.is_square() || a.size() != b.size() {
        return Err(Error::ShapeMismatch(format!(
            "compose_masks: {:?} · {:?}",
            a.0.shape(),
            b.0.shape()
        )));
    }
    Ok(AttentionMask(a.0.matmul(&b.0)?))
}

fn line_mask(action: &LatticeAction, n: usize) -> Result<AttentionMask> {
    mask_from_shift(&shift_vector(action, &LatticeShape::line(n)?)?, n)
}

fn kron_all(parts: Vec<AttentionMask>, max_size: usize) -> Result<AttentionMask> {
    let mut iter = parts.into_iter();
    let first = iter.next().expect("at least one dimension");
    iter.try_fold(first, |acc, m| kronecker_mask_with_limit(&acc, &m, max_size))
}

/// Exact mask for any valid action on any lattice.
///
/// Separable actions are assembled per dimension with Kronecker products;
/// rotation and diagonal reflection use the square 2-D shift vector;
/// compositions multiply the member masks.
pub fn action_mask(action: &LatticeAction, shape: &LatticeShape) -> Result<AttentionMask> {
    action_mask_with_limit(action, shape, DEFAULT_MAX_MASK_SIZE)
}

pub fn action_mask_with_limit(
    action: &LatticeAction,
    shape: &LatticeShape,
    max_size: usize,
) -> Result<AttentionMask> {
    action.validate(shape)?;
    let n = shape.n();
    if n > max_size {
        return Err(Error::SizeOverflow {
            requested: n,
            max: max_size,
        });
    }
    let dims = shape.dims();
    match action {
        LatticeAction::Identity => Ok(AttentionMask::identity(n)),
        LatticeAction::Translate { delta } => kron_all(
            dims.iter()
                .zip(delta)
                .map(|(&l, &d)| line_mask(&LatticeAction::translate([d]), l))
                .collect::<Result<_>>()?,
            max_size,
        ),
        LatticeAction::Reflect {
            axis: ReflectAxis::Dims(flip),
        } => kron_all(
            dims.iter()
                .enumerate()
                .map(|(d, &l)| {
                    if flip.contains(&d) {
                        line_mask(&LatticeAction::flip([0]), l)
                    } else {
                        Ok(AttentionMask::identity(l))
                    }
                })
                .collect::<Result<_>>()?,
            max_size,
        ),
        LatticeAction::Scale { factors, direction } => kron_all(
            dims.iter()
                .zip(factors)
                .map(|(&l, &h)| {
                    if h == 1 {
                        Ok(AttentionMask::identity(l))
                    } else {
                        line_mask(
                            &LatticeAction::Scale {
                                factors: vec![h],
                                direction: *direction,
                            },
                            l,
                        )
                    }
                })
                .collect::<Result<_>>()?,
            max_size,
        ),
        LatticeAction::Rotate90 { .. }
        | LatticeAction::Reflect {
            axis: ReflectAxis::Diagonal,
        } => mask_from_shift(&shift_vector(action, shape)?, n),
        LatticeAction::Compose { actions } => {
            let mut acc = AttentionMask::identity(n);
            for a in actions {
                let m = action_mask_with_limit(a, shape, max_size)?;
                acc = compose_masks(&m, &acc)?;
            }
            Ok(acc)
        }
    }
}

/// Frozen kernel families for the convolutional mask layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelFamily {
    Identity,
    /// Cyclic shift by `step` cells along a 1-D lattice.
    Translate { step: i64 },
    /// Reversal of a 1-D lattice.
    Reflect,
    /// Counter-clockwise quarter turns of a `side × side` lattice.
    Rotate { side: usize, quarter_turns: u8 },
    /// Transpose of a `side × side` lattice.
    Diagonal { side: usize },
    Scale {
        factor: usize,
        direction: ScaleDirection,
    },
}

impl KernelFamily {
    /// Translation by `2^level`, the step of the `level`-th translation layer.
    pub fn translate_level(level: u32) -> Self {
        Self::Translate { step: 1 << level }
    }

    fn shift(self, n: usize) -> Result<ShiftVector> {
        let line = || LatticeShape::line(n);
        let square = |side: usize| {
            if side * side != n {
                return Err(Error::InvalidShape(format!(
                    "{side}x{side} lattice does not have {n} cells"
                )));
            }
            LatticeShape::grid(side, side)
        };
        match self {
            Self::Identity => shift_vector(&LatticeAction::Identity, &line()?),
            Self::Translate { step } => shift_vector(&LatticeAction::translate([step]), &line()?),
            Self::Reflect => shift_vector(&LatticeAction::flip([0]), &line()?),
            Self::Rotate {
                side,
                quarter_turns,
            } => shift_vector(&LatticeAction::rotate(quarter_turns), &square(side)?),
            Self::Diagonal { side } => shift_vector(&LatticeAction::diagonal(), &square(side)?),
            Self::Scale { factor, direction } => shift_vector(
                &LatticeAction::Scale {
                    factors: vec![factor],
                    direction,
                },
                &line()?,
            ),
        }
    }
}

/// One frozen kernel per row: row `k` of the mask is the circular convolution
/// of identity row `k` with `kernels[k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelBank {
    kernels: DenseMatrix,
}

/// Inverse transform of the phase ramp for every row offset.
pub fn conv_kernels_for(family: KernelFamily, n: usize) -> Result<KernelBank> {
    let shift = family.shift(n)?;
    let dft = Dft::new(n);
    let mut kernels = DenseMatrix::zeros(n, n);
    for (k, &o) in shift.as_slice().iter().enumerate() {
        for (s, v) in dft.inverse(&dft.shift_phase(o)).into_iter().enumerate() {
            let snapped = v.re.round();
            let value = if (v.re - snapped).abs() < 1e-9 { snapped } else { v.re };
            kernels.set(k, s, value);
        }
    }
    Ok(KernelBank { kernels })
}

fn circular_convolve(kernel: &[f64], signal: &[f64]) -> Vec<f64> {
    let n = signal.len();
    let mut out = vec![0.0; n];
    for (t, slot) in out.iter_mut().enumerate() {
        *slot = (0..n).map(|s| kernel[s] * signal[(t + n - s) % n]).sum();
    }
    out
}

impl KernelBank {
    pub fn n(&self) -> usize {
        self.kernels.rows()
    }

    pub fn kernel(&self, row: usize) -> &[f64] {
        self.kernels.row(row)
    }

    /// Convolves every identity row with its kernel and rounds at 0.5.
    pub fn convolve_identity(&self) -> Result<AttentionMask> {
        let n = self.n();
        let mut out = DenseMatrix::zeros(n, n);
        for k in 0..n {
            let mut basis = vec![0.0; n];
            basis[k] = 1.0;
            out.row_mut(k)
                .copy_from_slice(&circular_convolve(self.kernel(k), &basis));
        }
        round_binary(&out).map(AttentionMask)
    }

    /// Source row read by each output row when the layer is applied to a
    /// mask, i.e. the tap position of each unit-impulse kernel.
    pub fn gather_index(&self) -> Result<Vec<usize>> {
        let n = self.n();
        (0..n)
            .map(|k| {
                let kernel = self.kernel(k);
                let taps: Vec<usize> = (0..n).filter(|&s| kernel[s] != 0.0).collect();
                match taps.as_slice() {
                    [s] if kernel[*s] == 1.0 => Ok((k + s) % n),
                    _ => Err(Error::NumericalInstability {
                        row: k,
                        col: taps.first().copied().unwrap_or(0),
                        value: taps.first().map_or(0.0, |&s| kernel[s]),
                    }),
                }
            })
            .collect()
    }

    /// Applies the layer to a mask: `out[k, :] = Σ_s kernel_k[s] · m[(k + s) mod n, :]`.
    pub fn apply(&self, m: &DenseMatrix) -> Result<DenseMatrix> {
        if m.rows() != self.n() {
            return Err(Error::ShapeMismatch(format!(
                "kernel bank of size {} applied to {:?}",
                self.n(),
                m.shape()
            )));
        }
        let n = self.n();
        let mut out = DenseMatrix::zeros(n, m.cols());
        for k in 0..n {
            for s in 0..n {
                let w = self.kernels.get(k, s);
                if w != 0.0 {
                    let src = m.row((k + s) % n).to_vec();
                    for (o, v) in out.row_mut(k).iter_mut().zip(src) {
                        *o += w * v;
                    }
                }
            }
        }
        Ok(out)
    }
}
