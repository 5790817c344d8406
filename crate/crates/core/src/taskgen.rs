//! Synthetic geometric tasks, colour augmentation and ARC-format grid files.
//!
//! Every generated output is the oracle [`LatticeAction::source_map`] applied
//! to the padded 30×30 input, so masks and tasks never share code.
//! Randomness comes from `ChaCha8Rng`, which produces the same stream on
//! every platform for a given 64-bit seed.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::ExpertFamily;
use crate::lattice::{LatticeAction, LatticeShape, ScaleDirection};

pub const MAX_SIDE: usize = 30;
pub const COLORS: usize = 10;
pub const BACKGROUND: u8 = 0;
pub const PROTOCOL_TRAIN_PAIRS: usize = 2048;
pub const PROTOCOL_TEST_PAIRS: usize = 100;

/// A rectangular grid of colours `0..10`, at most 30×30.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<u8>>", into = "Vec<Vec<u8>>")]
pub struct Grid {
    height: usize,
    width: usize,
    cells: Vec<u8>,
}

impl fmt::Debug for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Grid {}x{}", self.height, self.width)?;
        for r in 0..self.height {
            let row: String = self.row(r).iter().map(|c| char::from(b'0' + c)).collect();
            writeln!(f, "{row}")?;
        }
        Ok(())
    }
}

impl TryFrom<Vec<Vec<u8>>> for Grid {
    type Error = Error;

    fn try_from(rows: Vec<Vec<u8>>) -> Result<Self> {
        Grid::from_rows(&rows)
    }
}

impl From<Grid> for Vec<Vec<u8>> {
    fn from(g: Grid) -> Self {
        g.to_rows()
    }
}

fn invalid(message: String) -> Error {
    Error::Validation {
        location: "grid".into(),
        message,
    }
}

impl Grid {
    pub fn new(height: usize, width: usize, cells: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || height > MAX_SIDE || width > MAX_SIDE {
            return Err(invalid(format!(
                "size {height}x{width} outside 1..={MAX_SIDE}"
            )));
        }
        if cells.len() != height * width {
            return Err(invalid(format!(
                "{} cells for a {height}x{width} grid",
                cells.len()
            )));
        }
        if let Some(pos) = cells.iter().position(|&c| usize::from(c) >= COLORS) {
            return Err(invalid(format!(
                "colour {} at row {}, column {} is outside 0..=9",
                cells[pos],
                pos / width,
                pos % width
            )));
        }
        Ok(Self {
            height,
            width,
            cells,
        })
    }

    pub fn filled(height: usize, width: usize, color: u8) -> Result<Self> {
        Self::new(height, width, vec![color; height * width])
    }

    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        if let Some(r) = rows.iter().position(|r| r.len() != width) {
            return Err(invalid(format!(
                "row {r} has {} cells, row 0 has {width}",
                rows[r].len()
            )));
        }
        Self::new(rows.len(), width, rows.concat())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.cells[r * self.width + c]
    }

    pub fn set(&mut self, r: usize, c: usize, color: u8) {
        assert!(usize::from(color) < COLORS, "colour out of range");
        self.cells[r * self.width + c] = color;
    }

    pub fn row(&self, r: usize) -> &[u8] {
        &self.cells[r * self.width..(r + 1) * self.width]
    }

    pub fn to_rows(&self) -> Vec<Vec<u8>> {
        (0..self.height).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn shape(&self) -> LatticeShape {
        LatticeShape::grid(self.height, self.width).expect("validated size")
    }

    /// Places the grid in the top-left corner of a background canvas.
    pub fn padded(&self, height: usize, width: usize) -> Result<Self> {
        if height < self.height || width < self.width {
            return Err(invalid(format!(
                "cannot pad {}x{} into {height}x{width}",
                self.height, self.width
            )));
        }
        let mut out = Self::filled(height, width, BACKGROUND)?;
        for r in 0..self.height {
            out.cells[r * width..r * width + self.width].copy_from_slice(self.row(r));
        }
        Ok(out)
    }

    pub fn padded_full(&self) -> Result<Self> {
        self.padded(MAX_SIDE, MAX_SIDE)
    }

    /// Cells as class indices in row-major order.
    pub fn class_indices(&self) -> Vec<usize> {
        self.cells.iter().map(|&c| usize::from(c)).collect()
    }

    pub fn from_class_indices(height: usize, width: usize, cells: &[usize]) -> Result<Self> {
        let bytes = cells
            .iter()
            .map(|&c| u8::try_from(c).map_err(|_| invalid(format!("class {c} out of range"))))
            .collect::<Result<Vec<u8>>>()?;
        Self::new(height, width, bytes)
    }

    /// The oracle transform of the whole grid.
    pub fn transformed(&self, action: &LatticeAction) -> Result<Self> {
        let map = action.source_map(&self.shape())?;
        Self::new(
            self.height,
            self.width,
            map.iter().map(|&s| self.cells[s]).collect(),
        )
    }

    /// Block-replicates every cell `fy × fx` times.
    fn upscaled(&self, fy: usize, fx: usize) -> Result<Self> {
        let (h, w) = (self.height * fy, self.width * fx);
        let cells = (0..h * w)
            .map(|k| self.get(k / w / fy, k % w / fx))
            .collect();
        Self::new(h, w, cells)
    }
}

/// A permutation of the ten colours, background included.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColorPermutation([u8; COLORS]);

impl ColorPermutation {
    pub fn identity() -> Self {
        Self(std::array::from_fn(|i| i as u8))
    }

    pub fn new(map: [u8; COLORS]) -> Result<Self> {
        let mut seen = [false; COLORS];
        for &c in &map {
            let c = usize::from(c);
            if c >= COLORS || seen[c] {
                return Err(invalid(format!("{map:?} is not a permutation of 0..=9")));
            }
            seen[c] = true;
        }
        Ok(Self(map))
    }

    pub fn random(rng: &mut impl Rng) -> Self {
        let mut map = Self::identity().0;
        map.shuffle(rng);
        Self(map)
    }

    pub fn inverse(&self) -> Self {
        let mut inv = [0u8; COLORS];
        for (i, &c) in self.0.iter().enumerate() {
            inv[usize::from(c)] = i as u8;
        }
        Self(inv)
    }

    pub fn map(&self, color: u8) -> u8 {
        self.0[usize::from(color)]
    }
}

pub fn color_permute(grid: &Grid, permutation: &ColorPermutation) -> Grid {
    Grid {
        height: grid.height,
        width: grid.width,
        cells: grid.cells.iter().map(|&c| permutation.map(c)).collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pair {
    pub input: Grid,
    pub output: Grid,
}

impl Pair {
    pub fn permuted(&self, permutation: &ColorPermutation) -> Self {
        Self {
            input: color_permute(&self.input, permutation),
            output: color_permute(&self.output, permutation),
        }
    }
}

/// What a task is: its name, family, action and generation seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub category: ExpertFamily,
    pub action: LatticeAction,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub name: String,
    pub category: ExpertFamily,
    pub action: LatticeAction,
    pub seed: u64,
    pub train: Vec<Pair>,
    pub test: Vec<Pair>,
}

impl Task {
    pub fn spec(&self) -> TaskSpec {
        TaskSpec {
            name: self.name.clone(),
            category: self.category,
            action: self.action.clone(),
            seed: self.seed,
        }
    }

    /// Checks that every pair is a padded 30×30 grid transformed by the action.
    pub fn verify(&self) -> Result<()> {
        for (split, pairs) in [("train", &self.train), ("test", &self.test)] {
            for (i, pair) in pairs.iter().enumerate() {
                let location = format!("{}.{split}[{i}]", self.name);
                if pair.input.height != MAX_SIDE || pair.input.width != MAX_SIDE {
                    return Err(Error::Validation {
                        location,
                        message: "input is not padded to 30x30".into(),
                    });
                }
                if pair.input.transformed(&self.action)? != pair.output {
                    return Err(Error::Validation {
                        location,
                        message: format!("output is not `{}` of the input", self.action),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self).expect("tasks serialize"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| parse_error(path, &e))
    }
}

fn parse_error(path: &Path, e: &serde_json::Error) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    }
}

/// Where input grids come from.
#[derive(Clone, Debug, PartialEq)]
pub enum GridPool {
    /// Random rectangles, sprites and noise over colours 1–9 on background 0.
    Procedural,
    /// Grids supplied by the caller, e.g. read from ARC task files.
    Grids(Vec<Grid>),
}

impl GridPool {
    /// Draws a grid no larger than `max_h × max_w`.
    fn draw(&self, rng: &mut ChaCha8Rng, max_h: usize, max_w: usize) -> Result<Grid> {
        match self {
            Self::Procedural => procedural_grid(rng, max_h, max_w),
            Self::Grids(grids) => {
                let g = grids.choose(rng).ok_or(Error::EmptyPool)?;
                let (h, w) = (g.height.min(max_h), g.width.min(max_w));
                let cells = (0..h * w).map(|k| g.get(k / w, k % w)).collect();
                Grid::new(h, w, cells)
            }
        }
    }
}

fn procedural_grid(rng: &mut ChaCha8Rng, max_h: usize, max_w: usize) -> Result<Grid> {
    let h = rng.gen_range(max_h.min(3)..=max_h);
    let w = rng.gen_range(max_w.min(3)..=max_w);
    let mut g = Grid::filled(h, w, BACKGROUND)?;
    let color = |rng: &mut ChaCha8Rng| rng.gen_range(1..COLORS as u8);
    match rng.gen_range(0..3) {
        0 => {
            for _ in 0..rng.gen_range(1..=4) {
                let (r0, c0) = (rng.gen_range(0..h), rng.gen_range(0..w));
                let (r1, c1) = (rng.gen_range(r0..h), rng.gen_range(c0..w));
                let c = color(rng);
                for r in r0..=r1 {
                    for cc in c0..=c1 {
                        g.set(r, cc, c);
                    }
                }
            }
        }
        1 => {
            let (sh, sw) = (rng.gen_range(1..=h.min(4)), rng.gen_range(1..=w.min(4)));
            let sprite: Vec<u8> = (0..sh * sw)
                .map(|_| if rng.gen_bool(0.7) { color(rng) } else { BACKGROUND })
                .collect();
            for _ in 0..rng.gen_range(1..=5) {
                let (r0, c0) = (rng.gen_range(0..=h - sh), rng.gen_range(0..=w - sw));
                for (k, &c) in sprite.iter().enumerate() {
                    if c != BACKGROUND {
                        g.set(r0 + k / sw, c0 + k % sw, c);
                    }
                }
            }
        }
        _ => {
            let density = rng.gen_range(0.1..0.6);
            for r in 0..h {
                for c in 0..w {
                    if rng.gen_bool(density) {
                        g.set(r, c, color(rng));
                    }
                }
            }
        }
    }
    Ok(g)
}

/// Draws one padded input grid suited to the action.
fn draw_input(action: &LatticeAction, pool: &GridPool, rng: &mut ChaCha8Rng) -> Result<Grid> {
    let grid = match action {
        LatticeAction::Scale {
            factors,
            direction: ScaleDirection::Up,
        } => pool.draw(rng, MAX_SIDE / factors[0], MAX_SIDE / factors[1])?,
        LatticeAction::Scale {
            factors,
            direction: ScaleDirection::Down,
        } => {
            // a block-replicated small grid, keeping the last row and column free
            let small = pool.draw(rng, (MAX_SIDE - 1) / factors[0], (MAX_SIDE - 1) / factors[1])?;
            small.upscaled(factors[0], factors[1])?
        }
        _ => pool.draw(rng, MAX_SIDE, MAX_SIDE)?,
    };
    grid.padded_full()
}

/// Generates `n_train + n_test` pairs with pairwise-distinct inputs.
pub fn generate_task(spec: &TaskSpec, n_train: usize, n_test: usize, pool: &GridPool) -> Result<Task> {
    if let GridPool::Grids(g) = pool {
        if g.is_empty() {
            return Err(Error::EmptyPool);
        }
    }
    let full = LatticeShape::grid(MAX_SIDE, MAX_SIDE)?;
    spec.action.validate(&full)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let total = n_train + n_test;
    let mut seen = HashSet::with_capacity(total);
    let mut pairs = Vec::with_capacity(total);
    let mut attempts = 0usize;
    while pairs.len() < total {
        attempts += 1;
        if attempts > 50 * total + 1000 {
            return Err(Error::Validation {
                location: spec.name.clone(),
                message: format!("grid pool cannot supply {total} distinct inputs"),
            });
        }
        let input = draw_input(&spec.action, pool, &mut rng)?;
        if !seen.insert(input.clone()) {
            continue;
        }
        let output = input.transformed(&spec.action)?;
        pairs.push(Pair { input, output });
    }
    let test = pairs.split_off(n_train);
    Ok(Task {
        name: spec.name.clone(),
        category: spec.category,
        action: spec.action.clone(),
        seed: spec.seed,
        train: pairs,
        test,
    })
}

/// The 43-task suite: 5 translations, 3 rotations, 3 reflections, 32 scalings.
pub fn suite_specs(seed: u64) -> Vec<TaskSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut specs = Vec::new();
    let mut push = |rng: &mut ChaCha8Rng, name: String, category, action| {
        specs.push(TaskSpec {
            name,
            category,
            action,
            seed: rng.next_u64(),
        });
    };
    for _ in 0..5 {
        let (dy, dx) = (rng.gen_range(1..=29i64), rng.gen_range(1..=29i64));
        push(
            &mut rng,
            format!("translate_{dy}_{dx}"),
            ExpertFamily::Translate,
            LatticeAction::translate([dy, dx]),
        );
    }
    for turns in 1..=3u8 {
        push(
            &mut rng,
            format!("rotate_{}", 90 * u32::from(turns)),
            ExpertFamily::Rotate,
            LatticeAction::rotate(turns),
        );
    }
    for (name, action) in [
        ("reflect_rows", LatticeAction::flip([0])),
        ("reflect_cols", LatticeAction::flip([1])),
        ("reflect_diag", LatticeAction::diagonal()),
    ] {
        push(&mut rng, name.to_string(), ExpertFamily::Reflect, action);
    }
    for direction in [ScaleDirection::Up, ScaleDirection::Down] {
        for hy in 2..=5usize {
            for hx in 2..=5usize {
                let dir = match direction {
                    ScaleDirection::Up => "up",
                    ScaleDirection::Down => "down",
                };
                push(
                    &mut rng,
                    format!("scale_{dir}_{hy}x{hx}"),
                    ExpertFamily::Scale,
                    LatticeAction::Scale {
                        factors: vec![hy, hx],
                        direction,
                    },
                );
            }
        }
    }
    specs
}

pub fn sample_task_suite(seed: u64, n_train: usize, n_test: usize, pool: &GridPool) -> Result<Vec<Task>> {
    suite_specs(seed)
        .iter()
        .map(|spec| generate_task(spec, n_train, n_test, pool))
        .collect()
}

/// One task in the public ARC file layout.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArcTask {
    pub train: Vec<Pair>,
    pub test: Vec<Pair>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ArcFile {
    One(RawArcTask),
    Many(Vec<RawArcTask>),
}

#[derive(Deserialize)]
struct RawArcTask {
    train: Vec<RawPair>,
    test: Vec<RawPair>,
}

#[derive(Deserialize)]
struct RawPair {
    input: Vec<Vec<i64>>,
    output: Vec<Vec<i64>>,
}

fn checked_grid(rows: &[Vec<i64>], location: String) -> Result<Grid> {
    let mut bytes = Vec::with_capacity(rows.len());
    for (r, row) in rows.iter().enumerate() {
        let mut out = Vec::with_capacity(row.len());
        for (c, &v) in row.iter().enumerate() {
            match u8::try_from(v) {
                Ok(b) if usize::from(b) < COLORS => out.push(b),
                _ => {
                    return Err(Error::Validation {
                        location,
                        message: format!("colour {v} at row {r}, column {c} is outside 0..=9"),
                    })
                }
            }
        }
        bytes.push(out);
    }
    Grid::from_rows(&bytes).map_err(|e| match e {
        Error::Validation { message, .. } => Error::Validation { location, message },
        other => other,
    })
}

/// Reads an ARC task file (one task object, or an array of them).
pub fn load_arc_json(path: &Path) -> Result<Vec<ArcTask>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: ArcFile = serde_json::from_str(&text).map_err(|e| parse_error(path, &e))?;
    let raw = match file {
        ArcFile::One(t) => vec![t],
        ArcFile::Many(ts) => ts,
    };
    let name = path.display().to_string();
    raw.iter()
        .enumerate()
        .map(|(t, task)| {
            let convert = |split: &str, pairs: &[RawPair]| -> Result<Vec<Pair>> {
                pairs
                    .iter()
                    .enumerate()
                    .map(|(i, p)| {
                        let at = |side: &str| format!("{name}: task {t} {split}[{i}].{side}");
                        Ok(Pair {
                            input: checked_grid(&p.input, at("input"))?,
                            output: checked_grid(&p.output, at("output"))?,
                        })
                    })
                    .collect()
            };
            Ok(ArcTask {
                train: convert("train", &task.train)?,
                test: convert("test", &task.test)?,
            })
        })
        .collect()
}

/// Writes tasks in the ARC layout: a single object for one task, else an array.
pub fn write_arc_json(path: &Path, tasks: &[ArcTask]) -> Result<()> {
    let text = match tasks {
        [one] => serde_json::to_string(one),
        many => serde_json::to_string(many),
    }
    .expect("grids serialize");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
