//! Hypercubic lattice shapes, symbolic lattice actions, and the direct
//! index-permutation oracle that realizes an action on a tensor.
//!
//! Tensors over a lattice are stored as `n × channels` matrices: row `k` holds
//! the features of cell `k`, cells are flattened row-major (the last dimension
//! varies fastest).
//!
//! Nothing in this module builds or consults a mask; [`apply_action`] and
//! [`LatticeAction::source_map`] work purely on multi-indices so they can serve
//! as an independent check of the mask constructions in [`crate::mask`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct LatticeShape {
    dims: Vec<usize>,
}

impl LatticeShape {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::InvalidShape("a lattice needs at least one dimension".into()));
        }
        if let Some(pos) = dims.iter().position(|&l| l == 0) {
            return Err(Error::InvalidShape(format!("dimension {pos} has size 0")));
        }
        Ok(Self { dims })
    }

    pub fn line(n: usize) -> Result<Self> {
        Self::new(vec![n])
    }

    pub fn grid(rows: usize, cols: usize) -> Result<Self> {
        Self::new(vec![rows, cols])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    /// Total number of cells.
    pub fn n(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_square(&self) -> bool {
        self.dims.len() == 2 && self.dims[0] == self.dims[1]
    }

    /// Row-major multi-index of the flat (0-based) cell `k`.
    pub fn multi_index(&self, mut k: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dims.len()];
        for (slot, &l) in idx.iter_mut().zip(&self.dims).rev() {
            *slot = k % l;
            k /= l;
        }
        idx
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter()
            .zip(&self.dims)
            .fold(0, |acc, (&i, &l)| acc * l + i)
    }
}

impl TryFrom<Vec<usize>> for LatticeShape {
    type Error = Error;

    fn try_from(dims: Vec<usize>) -> Result<Self> {
        Self::new(dims)
    }
}

impl From<LatticeShape> for Vec<usize> {
    fn from(shape: LatticeShape) -> Self {
        shape.dims
    }
}

impl fmt::Display for LatticeShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.dims.iter().map(usize::to_string).collect();
        f.write_str(&parts.join("x"))
    }
}

impl FromStr for LatticeShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let dims = s
            .split('x')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::InvalidShape(format!("cannot parse {s:?} as a shape")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(dims)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleDirection {
    Up,
    Down,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReflectAxis {
    /// Flip every listed dimension.
    Dims(Vec<usize>),
    /// Transpose about the main diagonal of a square 2-D lattice.
    Diagonal,
}

/// A geometric action on a hypercubic lattice.
///
/// `Compose` applies its members in order: the first element acts first.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LatticeAction {
    Identity,
    /// Cyclic shift by `delta[i]` cells along dimension `i`: `out[k] = in[k - delta]`.
    Translate { delta: Vec<i64> },
    /// Counter-clockwise quarter turns of a square 2-D lattice.
    Rotate90 { quarter_turns: u8 },
    Reflect { axis: ReflectAxis },
    /// Nearest-neighbour scaling by an integer factor per dimension.
    Scale {
        factors: Vec<usize>,
        direction: ScaleDirection,
    },
    Compose { actions: Vec<LatticeAction> },
}

impl LatticeAction {
    pub fn translate(delta: impl Into<Vec<i64>>) -> Self {
        Self::Translate {
            delta: delta.into(),
        }
    }

    pub fn rotate(quarter_turns: u8) -> Self {
        Self::Rotate90 { quarter_turns }
    }

    pub fn flip(dims: impl Into<Vec<usize>>) -> Self {
        Self::Reflect {
            axis: ReflectAxis::Dims(dims.into()),
        }
    }

    pub fn diagonal() -> Self {
        Self::Reflect {
            axis: ReflectAxis::Diagonal,
        }
    }

    pub fn scale_up(factors: impl Into<Vec<usize>>) -> Self {
        Self::Scale {
            factors: factors.into(),
            direction: ScaleDirection::Up,
        }
    }

    pub fn scale_down(factors: impl Into<Vec<usize>>) -> Self {
        Self::Scale {
            factors: factors.into(),
            direction: ScaleDirection::Down,
        }
    }

    pub fn then(self, next: LatticeAction) -> Self {
        match self {
            Self::Compose { mut actions } => {
                actions.push(next);
                Self::Compose { actions }
            }
            first => Self::Compose {
                actions: vec![first, next],
            },
        }
    }

    pub fn is_primitive(&self) -> bool {
        !matches!(self, Self::Compose { .. })
    }

    /// Checks that the action is well defined on `shape`.
    pub fn validate(&self, shape: &LatticeShape) -> Result<()> {
        let rank = shape.rank();
        match self {
            Self::Identity => Ok(()),
            Self::Translate { delta } => {
                if delta.len() != rank {
                    return Err(Error::InvalidShape(format!(
                        "translation has {} components for a rank-{rank} lattice",
                        delta.len()
                    )));
                }
                Ok(())
            }
            Self::Rotate90 { quarter_turns } => {
                if !(1..=3).contains(quarter_turns) {
                    return Err(Error::InvalidAction(format!(
                        "rotation by {quarter_turns} quarter turns; expected 1, 2 or 3"
                    )));
                }
                if !shape.is_square() {
                    return Err(Error::InvalidShape(format!(
                        "rotation needs a square 2-D lattice, got {shape}"
                    )));
                }
                Ok(())
            }
            Self::Reflect {
                axis: ReflectAxis::Diagonal,
            } => {
                if !shape.is_square() {
                    return Err(Error::InvalidShape(format!(
                        "diagonal reflection needs a square 2-D lattice, got {shape}"
                    )));
                }
                Ok(())
            }
            Self::Reflect {
                axis: ReflectAxis::Dims(dims),
            } => {
                if let Some(&d) = dims.iter().find(|&&d| d >= rank) {
                    return Err(Error::InvalidShape(format!(
                        "reflection axis {d} out of range for rank {rank}"
                    )));
                }
                Ok(())
            }
            Self::Scale { factors, .. } => {
                if factors.len() != rank {
                    return Err(Error::InvalidShape(format!(
                        "scaling has {} factors for a rank-{rank} lattice",
                        factors.len()
                    )));
                }
                if let Some(&h) = factors.iter().find(|&&h| h == 0) {
                    return Err(Error::InvalidFactor(h));
                }
                if factors.iter().all(|&h| h == 1) {
                    return Err(Error::InvalidFactor(1));
                }
                Ok(())
            }
            Self::Compose { actions } => actions.iter().try_for_each(|a| a.validate(shape)),
        }
    }

    /// For every output cell, the input cell it copies (0-based, row-major).
    pub fn source_map(&self, shape: &LatticeShape) -> Result<Vec<usize>> {
        self.validate(shape)?;
        let n = shape.n();
        if let Self::Compose { actions } = self {
            // out = a_last(... a_first(in)) so out[k] = in[s_first(...s_last(k))]
            let mut map: Vec<usize> = (0..n).collect();
            for action in actions {
                let step = action.source_map(shape)?;
                map = step.iter().map(|&s| map[s]).collect();
            }
            return Ok(map);
        }
        let dims = shape.dims();
        Ok((0..n)
            .map(|k| {
                let out = shape.multi_index(k);
                shape.flat_index(&self.primitive_source(dims, &out))
            })
            .collect())
    }

    fn primitive_source(&self, dims: &[usize], out: &[usize]) -> Vec<usize> {
        match self {
            Self::Identity => out.to_vec(),
            Self::Translate { delta } => out
                .iter()
                .zip(delta)
                .zip(dims)
                .map(|((&i, &d), &l)| (i as i64 - d).rem_euclid(l as i64) as usize)
                .collect(),
            Self::Rotate90 { quarter_turns } => {
                let l = dims[0];
                let (mut r, mut c) = (out[0], out[1]);
                // one counter-clockwise turn reads out[r][c] = in[c][l-1-r]
                for _ in 0..*quarter_turns {
                    (r, c) = (c, l - 1 - r);
                }
                vec![r, c]
            }
            Self::Reflect {
                axis: ReflectAxis::Diagonal,
            } => vec![out[1], out[0]],
            Self::Reflect {
                axis: ReflectAxis::Dims(flip),
            } => out
                .iter()
                .enumerate()
                .map(|(d, &i)| {
                    if flip.contains(&d) {
                        dims[d] - 1 - i
                    } else {
                        i
                    }
                })
                .collect(),
            Self::Scale { factors, direction } => out
                .iter()
                .zip(factors)
                .zip(dims)
                .map(|((&i, &h), &l)| match direction {
                    ScaleDirection::Up => i / h,
                    ScaleDirection::Down => {
                        if i < l.div_ceil(h) {
                            i * h
                        } else {
                            l - 1
                        }
                    }
                })
                .collect(),
            Self::Compose { .. } => unreachable!("compose handled by source_map"),
        }
    }

    /// The inverse action where one exists (scaling has none).
    pub fn inverse(&self) -> Option<Self> {
        Some(match self {
            Self::Identity => Self::Identity,
            Self::Translate { delta } => Self::Translate {
                delta: delta.iter().map(|d| -d).collect(),
            },
            Self::Rotate90 { quarter_turns } => Self::Rotate90 {
                quarter_turns: (4 - quarter_turns) % 4,
            },
            Self::Reflect { .. } => self.clone(),
            Self::Scale { .. } => return None,
            Self::Compose { actions } => Self::Compose {
                actions: actions
                    .iter()
                    .rev()
                    .map(Self::inverse)
                    .collect::<Option<Vec<_>>>()?,
            },
        })
    }
}

/// Applies `action` to a lattice tensor (`n × channels`, one row per cell)
/// by direct index permutation / replication.
pub fn apply_action(
    action: &LatticeAction,
    shape: &LatticeShape,
    tensor: &DenseMatrix,
) -> Result<DenseMatrix> {
    if tensor.rows() != shape.n() {
        return Err(Error::InvalidShape(format!(
            "tensor has {} rows, lattice {shape} has {} cells",
            tensor.rows(),
            shape.n()
        )));
    }
    let map = action.source_map(shape)?;
    Ok(tensor.gather_rows(&map))
}

fn join<T: ToString>(items: &[T]) -> String {
    items
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

impl fmt::Display for LatticeAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Identity => f.write_str("identity"),
            Self::Translate { delta } => write!(f, "translate:{}", join(delta)),
            Self::Rotate90 { quarter_turns } => write!(f, "rotate:{quarter_turns}"),
            Self::Reflect {
                axis: ReflectAxis::Diagonal,
            } => f.write_str("reflect:diag"),
            Self::Reflect {
                axis: ReflectAxis::Dims(dims),
            } => write!(f, "reflect:{}", join(dims)),
            Self::Scale { factors, direction } => {
                let dir = match direction {
                    ScaleDirection::Up => "up",
                    ScaleDirection::Down => "down",
                };
                write!(f, "scale-{dir}:{}", join(factors))
            }
            Self::Compose { actions } => {
                let parts: Vec<String> = actions.iter().map(ToString::to_string).collect();
                f.write_str(&parts.join("+"))
            }
        }
    }
}

fn parse_list<T: FromStr>(s: &str, whole: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<T>()
                .map_err(|_| Error::InvalidAction(format!("cannot parse {whole:?}")))
        })
        .collect()
}

/// Parses `identity`, `translate:1,-2`, `rotate:1`, `reflect:0`, `reflect:0,1`,
/// `reflect:diag`, `scale-up:2,3`, `scale-down:2,2`, and `+`-joined
/// compositions (left acts first).
impl FromStr for LatticeAction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.contains('+') {
            let actions = s.split('+').map(str::parse).collect::<Result<Vec<_>>>()?;
            return Ok(Self::Compose { actions });
        }
        let (head, args) = s.split_once(':').unwrap_or((s, ""));
        match head {
            "identity" | "id" => Ok(Self::Identity),
            "translate" => Ok(Self::translate(parse_list::<i64>(args, s)?)),
            "rotate" => Ok(Self::rotate(
                args.parse()
                    .map_err(|_| Error::InvalidAction(format!("cannot parse {s:?}")))?,
            )),
            "reflect" if args == "diag" => Ok(Self::diagonal()),
            "reflect" => Ok(Self::flip(parse_list::<usize>(args, s)?)),
            "scale-up" => Ok(Self::scale_up(parse_list::<usize>(args, s)?)),
            "scale-down" => Ok(Self::scale_down(parse_list::<usize>(args, s)?)),
            _ => Err(Error::InvalidAction(format!("unknown action {s:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn column(values: &[f64]) -> DenseMatrix {
        DenseMatrix::from_vec(values.len(), 1, values.to_vec()).unwrap()
    }

    // a b / c d encoded as 1 2 / 3 4
    fn abcd() -> (LatticeShape, DenseMatrix) {
        (LatticeShape::grid(2, 2).unwrap(), column(&[1.0, 2.0, 3.0, 4.0]))
    }

    #[test]
    fn rotate_quarter_turn_counter_clockwise() {
        let (shape, x) = abcd();
        let y = apply_action(&LatticeAction::rotate(1), &shape, &x).unwrap();
        // (a,b;c,d) -> (b,d;a,c)
        assert_eq!(y.as_slice(), &[2.0, 4.0, 1.0, 3.0]);
    }

    #[test]
    fn cyclic_translation_on_both_axes() {
        let (shape, x) = abcd();
        let y = apply_action(&LatticeAction::translate([1, 1]), &shape, &x).unwrap();
        // (a,b;c,d) -> (d,c;b,a)
        assert_eq!(y.as_slice(), &[4.0, 3.0, 2.0, 1.0]);
    }

    #[test]
    fn upscaling_duplicates_cells() {
        let shape = LatticeShape::line(4).unwrap();
        let x = column(&[1.0, 2.0, 3.0, 4.0]);
        let y = apply_action(&LatticeAction::scale_up([2]), &shape, &x).unwrap();
        assert_eq!(y.as_slice(), &[1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn downscaling_samples_every_hth_cell() {
        let shape = LatticeShape::line(5).unwrap();
        let x = column(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        let y = apply_action(&LatticeAction::scale_down([2]), &shape, &x).unwrap();
        // ceil(5/2) = 3 retained cells, the rest read the last cell
        assert_eq!(y.as_slice(), &[1.0, 3.0, 5.0, 5.0, 5.0]);
    }

    #[test]
    fn diagonal_is_rotation_then_row_flip() {
        let shape = LatticeShape::grid(3, 3).unwrap();
        let composed = LatticeAction::rotate(1).then(LatticeAction::flip([0]));
        assert_eq!(
            LatticeAction::diagonal().source_map(&shape).unwrap(),
            composed.source_map(&shape).unwrap()
        );
    }

    #[test]
    fn rotation_rejects_rectangles() {
        let shape = LatticeShape::grid(2, 3).unwrap();
        assert!(matches!(
            LatticeAction::rotate(1).validate(&shape),
            Err(Error::InvalidShape(_))
        ));
        assert!(matches!(
            LatticeAction::diagonal().validate(&shape),
            Err(Error::InvalidShape(_))
        ));
    }

    #[test]
    fn scale_rejects_unit_factors() {
        let shape = LatticeShape::line(4).unwrap();
        assert!(matches!(
            LatticeAction::scale_up([1]).validate(&shape),
            Err(Error::InvalidFactor(1))
        ));
    }

    #[test]
    fn inverse_undoes_action() {
        let shape = LatticeShape::grid(4, 4).unwrap();
        let x = DenseMatrix::from_fn(16, 2, |i, j| (i * 2 + j) as f64);
        let g = LatticeAction::translate([1, 3])
            .then(LatticeAction::rotate(1))
            .then(LatticeAction::flip([1]));
        let y = apply_action(&g, &shape, &x).unwrap();
        let back = apply_action(&g.inverse().unwrap(), &shape, &y).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn parse_display_round_trip() {
        for text in [
            "identity",
            "translate:1,-2",
            "rotate:3",
            "reflect:diag",
            "reflect:0,1",
            "scale-up:2,3",
            "scale-down:5,2",
            "rotate:1+reflect:0",
        ] {
            let action: LatticeAction = text.parse().unwrap();
            assert_eq!(action.to_string(), text);
        }
        assert!("spin:2".parse::<LatticeAction>().is_err());
    }

    #[test]
    fn multi_index_is_row_major() {
        let shape = LatticeShape::new(vec![2, 3, 4]).unwrap();
        assert_eq!(shape.multi_index(0), vec![0, 0, 0]);
        assert_eq!(shape.multi_index(5), vec![0, 1, 1]);
        assert_eq!(shape.multi_index(23), vec![1, 2, 3]);
        for k in 0..shape.n() {
            assert_eq!(shape.flat_index(&shape.multi_index(k)), k);
        }
    }
}
