//! Atomic structures, neighbor graphs, corruption sampling, and augmentation.
//!
//! Positions are in Å. Cells are row-major lattice vectors (row `a` is the
//! first lattice vector). Neighbor graphs are symmetric directed edge sets;
//! edge enumeration order — source, then target, then lexicographic image
//! shift — is deterministic and fixed, because downstream scatter operations
//! are bitwise-order-sensitive.

mod xyz;

pub use xyz::{parse_xyz, write_xyz, XyzError};

use crate::rng;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;
use thiserror::Error;

pub const ELEMENT_SYMBOLS: [&str; 119] = [
    "X", "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne", "Na", "Mg", "Al", "Si", "P", "S",
    "Cl", "Ar", "K", "Ca", "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn", "Ga", "Ge",
    "As", "Se", "Br", "Kr", "Rb", "Sr", "Y", "Zr", "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd",
    "In", "Sn", "Sb", "Te", "I", "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd", "Pm", "Sm", "Eu", "Gd",
    "Tb", "Dy", "Ho", "Er", "Tm", "Yb", "Lu", "Hf", "Ta", "W", "Re", "Os", "Ir", "Pt", "Au", "Hg",
    "Tl", "Pb", "Bi", "Po", "At", "Rn", "Fr", "Ra", "Ac", "Th", "Pa", "U", "Np", "Pu", "Am", "Cm",
    "Bk", "Cf", "Es", "Fm", "Md", "No", "Lr", "Rf", "Db", "Sg", "Bh", "Hs", "Mt", "Ds", "Rg", "Cn",
    "Nh", "Fl", "Mc", "Lv", "Ts", "Og",
];

pub fn z_to_symbol(z: u8) -> Option<&'static str> {
    ELEMENT_SYMBOLS.get(z as usize).copied().filter(|_| z >= 1)
}

pub fn symbol_to_z(sym: &str) -> Option<u8> {
    ELEMENT_SYMBOLS
        .iter()
        .position(|&s| s == sym)
        .filter(|&i| i >= 1)
        .map(|i| i as u8)
}

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("species/position length mismatch: {species} species vs {positions} positions")]
    LengthMismatch { species: usize, positions: usize },
    #[error("periodic boundary requested on axis {axis} but no cell is set")]
    PbcWithoutCell { axis: usize },
    #[error("non-finite coordinate at atom {atom}")]
    NonFiniteCoordinate { atom: usize },
    #[error("atomic number {z} at atom {atom} outside 1..=118")]
    BadSpecies { atom: usize, z: u8 },
    #[error("tags present for {tags} atoms but structure has {atoms}")]
    TagLengthMismatch { tags: usize, atoms: usize },
    #[error("forces present for {forces} atoms but structure has {atoms}")]
    ForceLengthMismatch { forces: usize, atoms: usize },
    #[error("cutoff must be positive and finite, got {0}")]
    BadCutoff(f64),
    #[error("noise scale must be non-negative and finite, got {0}")]
    BadSigma(f64),
    #[error("singular cell (volume {volume:.3e})")]
    SingularCell { volume: f64 },
    #[error("coincident atoms {i} and {j} (zero distance within cutoff)")]
    CoincidentAtoms { i: usize, j: usize },
    #[error("structure has no component tags")]
    MissingTags,
    #[error("no atoms carry component tag {tag}")]
    EmptyComponent { tag: ComponentTag },
    #[error("cell repeat requires a periodic structure")]
    NotPeriodic,
    #[error("probability must lie in [0, 1], got {0}")]
    BadProbability(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComponentTag {
    A,
    B,
}

impl std::fmt::Display for ComponentTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ComponentTag::A => "A",
            ComponentTag::B => "B",
        })
    }
}

/// Optional supervision attached to a structure.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Labels {
    pub energy: Option<f64>,
    pub forces: Option<Vec<[f64; 3]>>,
    /// Named scalar properties (e.g. a gap or a binding affinity).
    pub scalars: BTreeMap<String, f64>,
}

impl Labels {
    pub fn is_empty(&self) -> bool {
        self.energy.is_none() && self.forces.is_none() && self.scalars.is_empty()
    }

    /// Look up a scalar target by key; `"energy"` resolves to the energy label.
    pub fn scalar(&self, key: &str) -> Option<f64> {
        if key == "energy" {
            self.energy
        } else {
            self.scalars.get(key).copied()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AtomicStructure {
    /// Atomic numbers, 1..=118.
    pub species: Vec<u8>,
    /// Cartesian positions in Å, one row per atom.
    pub positions: Vec<[f64; 3]>,
    /// Row-major lattice vectors, if periodic (or simply known).
    pub cell: Option<[[f64; 3]; 3]>,
    pub pbc: [bool; 3],
    /// Per-atom component labels for pair tasks.
    pub tags: Option<Vec<ComponentTag>>,
    pub labels: Labels,
}

impl AtomicStructure {
    pub fn new(species: Vec<u8>, positions: Vec<[f64; 3]>) -> Self {
        AtomicStructure {
            species,
            positions,
            cell: None,
            pbc: [false; 3],
            tags: None,
            labels: Labels::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.species.len()
    }

    pub fn is_empty(&self) -> bool {
        self.species.is_empty()
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.species.len() != self.positions.len() {
            return Err(GeometryError::LengthMismatch {
                species: self.species.len(),
                positions: self.positions.len(),
            });
        }
        for (atom, &z) in self.species.iter().enumerate() {
            if z < 1 || z > 118 {
                return Err(GeometryError::BadSpecies { atom, z });
            }
        }
        for (atom, p) in self.positions.iter().enumerate() {
            if !p.iter().all(|v| v.is_finite()) {
                return Err(GeometryError::NonFiniteCoordinate { atom });
            }
        }
        for (axis, &on) in self.pbc.iter().enumerate() {
            if on && self.cell.is_none() {
                return Err(GeometryError::PbcWithoutCell { axis });
            }
        }
        if let Some(tags) = &self.tags {
            if tags.len() != self.species.len() {
                return Err(GeometryError::TagLengthMismatch {
                    tags: tags.len(),
                    atoms: self.species.len(),
                });
            }
        }
        if let Some(forces) = &self.labels.forces {
            if forces.len() != self.species.len() {
                return Err(GeometryError::ForceLengthMismatch {
                    forces: forces.len(),
                    atoms: self.species.len(),
                });
            }
        }
        Ok(())
    }

    /// Chemical formula in Hill order (C then H then alphabetical; without
    /// carbon, fully alphabetical). `[8,1,1]` renders as `"H2O"`.
    pub fn formula(&self) -> String {
        let mut counts: BTreeMap<&'static str, usize> = BTreeMap::new();
        for &z in &self.species {
            *counts.entry(z_to_symbol(z).unwrap_or("?")).or_default() += 1;
        }
        let mut order: Vec<&'static str> = counts.keys().copied().collect();
        order.sort_unstable();
        if counts.contains_key("C") {
            order.retain(|s| *s != "C" && *s != "H");
            let mut head = vec!["C"];
            if counts.contains_key("H") {
                head.push("H");
            }
            head.extend(order);
            order = head;
        }
        let mut out = String::new();
        for sym in order {
            out.push_str(sym);
            let c = counts[sym];
            if c > 1 {
                out.push_str(&c.to_string());
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Neighbor graphs
// ---------------------------------------------------------------------------

/// Directed edge set within a cutoff. Edges come in (i→j, j→i) pairs; under
/// periodic boundaries the same (src, dst) may appear once per image shift.
#[derive(Debug, Clone)]
pub struct NeighborGraph {
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    /// `positions[dst] + shift·cell - positions[src]`.
    pub disp: Vec<[f64; 3]>,
    pub dist: Vec<f64>,
    /// Integer image shift of the target atom (all zero for open boundaries).
    pub shift: Vec<[i32; 3]>,
    pub cutoff: f64,
}

impl NeighborGraph {
    pub fn num_edges(&self) -> usize {
        self.src.len()
    }
}

fn det3(c: &[[f64; 3]; 3]) -> f64 {
    c[0][0] * (c[1][1] * c[2][2] - c[1][2] * c[2][1])
        - c[0][1] * (c[1][0] * c[2][2] - c[1][2] * c[2][0])
        + c[0][2] * (c[1][0] * c[2][1] - c[1][1] * c[2][0])
}

fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm3(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

/// Displacement and squared distance between atoms of an open structure.
/// Shared by the brute-force and cell-list paths so both are bitwise equal.
#[inline]
fn open_pair(positions: &[[f64; 3]], i: usize, j: usize) -> ([f64; 3], f64) {
    let d = [
        positions[j][0] - positions[i][0],
        positions[j][1] - positions[i][1],
        positions[j][2] - positions[i][2],
    ];
    (d, d[0] * d[0] + d[1] * d[1] + d[2] * d[2])
}

/// Build the neighbor graph of `s` at `cutoff`.
///
/// Open boundaries use an O(N²) scan, switching to an exact-agreement cell
/// list for larger systems. Periodic axes enumerate every image shift that
/// can reach the cutoff, so cells smaller than 2·cutoff produce multiple
/// edges per atom pair (and self-image edges), as they must.
pub fn build_neighbor_graph(
    s: &AtomicStructure,
    cutoff: f64,
) -> Result<NeighborGraph, GeometryError> {
    if !(cutoff > 0.0 && cutoff.is_finite()) {
        return Err(GeometryError::BadCutoff(cutoff));
    }
    s.validate()?;
    let n = s.len();
    let mut g = NeighborGraph {
        src: Vec::new(),
        dst: Vec::new(),
        disp: Vec::new(),
        dist: Vec::new(),
        shift: Vec::new(),
        cutoff,
    };
    if n == 0 {
        return Ok(g);
    }
    let periodic = s.pbc.iter().any(|&b| b);
    let c2 = cutoff * cutoff;
    if !periodic {
        const CELL_LIST_THRESHOLD: usize = 48;
        let pairs: Vec<(usize, usize)> = if n >= CELL_LIST_THRESHOLD {
            open_pairs_cell_list(&s.positions, cutoff)
        } else {
            let mut out = Vec::new();
            for i in 0..n {
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    let (_, d2) = open_pair(&s.positions, i, j);
                    if d2 <= c2 {
                        out.push((i, j));
                    }
                }
            }
            out
        };
        for (i, j) in pairs {
            let (d, d2) = open_pair(&s.positions, i, j);
            if d2 == 0.0 {
                return Err(GeometryError::CoincidentAtoms { i: i.min(j), j: i.max(j) });
            }
            g.src.push(i);
            g.dst.push(j);
            g.disp.push(d);
            g.dist.push(d2.sqrt());
            g.shift.push([0; 3]);
        }
        return Ok(g);
    }

    let cell = s.cell.expect("validated: pbc implies cell");
    let volume = det3(&cell).abs();
    if volume < 1e-12 {
        return Err(GeometryError::SingularCell { volume });
    }
    // Perpendicular spacing between lattice planes normal to each axis
    // bounds how many images can reach the cutoff.
    let mut max_shift = [0i32; 3];
    for a in 0..3 {
        if s.pbc[a] {
            let b = cell[(a + 1) % 3];
            let c = cell[(a + 2) % 3];
            let h = volume / norm3(cross3(b, c));
            max_shift[a] = (cutoff / h).ceil() as i32;
        }
    }
    for i in 0..n {
        for j in 0..n {
            for sa in -max_shift[0]..=max_shift[0] {
                for sb in -max_shift[1]..=max_shift[1] {
                    for sc in -max_shift[2]..=max_shift[2] {
                        if i == j && sa == 0 && sb == 0 && sc == 0 {
                            continue;
                        }
                        let (sa_f, sb_f, sc_f) = (sa as f64, sb as f64, sc as f64);
                        let mut d = [0.0; 3];
                        for (k, dk) in d.iter_mut().enumerate() {
                            *dk = s.positions[j][k]
                                + sa_f * cell[0][k]
                                + sb_f * cell[1][k]
                                + sc_f * cell[2][k]
                                - s.positions[i][k];
                        }
                        let d2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
                        if d2 > c2 {
                            continue;
                        }
                        if d2 == 0.0 {
                            return Err(GeometryError::CoincidentAtoms {
                                i: i.min(j),
                                j: i.max(j),
                            });
                        }
                        g.src.push(i);
                        g.dst.push(j);
                        g.disp.push(d);
                        g.dist.push(d2.sqrt());
                        g.shift.push([sa, sb, sc]);
                    }
                }
            }
        }
    }
    Ok(g)
}

/// Cell-list pair candidates for open boundaries, emitted in exactly the
/// brute-force order (src ascending, then dst ascending).
fn open_pairs_cell_list(positions: &[[f64; 3]], cutoff: f64) -> Vec<(usize, usize)> {
    let n = positions.len();
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in positions {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let mut dims = [0usize; 3];
    for k in 0..3 {
        dims[k] = (((hi[k] - lo[k]) / cutoff).floor() as usize + 1).max(1);
    }
    let bin_of = |p: &[f64; 3]| -> [usize; 3] {
        let mut b = [0usize; 3];
        for k in 0..3 {
            b[k] = (((p[k] - lo[k]) / cutoff).floor() as usize).min(dims[k] - 1);
        }
        b
    };
    let flat = |b: [usize; 3]| (b[0] * dims[1] + b[1]) * dims[2] + b[2];
    let mut bins: Vec<Vec<usize>> = vec![Vec::new(); dims[0] * dims[1] * dims[2]];
    for (i, p) in positions.iter().enumerate() {
        bins[flat(bin_of(p))].push(i);
    }
    let c2 = cutoff * cutoff;
    let mut out = Vec::new();
    let mut candidates: Vec<usize> = Vec::new();
    for i in 0..n {
        let b = bin_of(&positions[i]);
        candidates.clear();
        for da in -1i64..=1 {
            let ba = b[0] as i64 + da;
            if ba < 0 || ba >= dims[0] as i64 {
                continue;
            }
            for db in -1i64..=1 {
                let bb = b[1] as i64 + db;
                if bb < 0 || bb >= dims[1] as i64 {
                    continue;
                }
                for dc in -1i64..=1 {
                    let bc = b[2] as i64 + dc;
                    if bc < 0 || bc >= dims[2] as i64 {
                        continue;
                    }
                    candidates.extend(&bins[flat([ba as usize, bb as usize, bc as usize])]);
                }
            }
        }
        candidates.sort_unstable();
        for &j in &candidates {
            if j == i {
                continue;
            }
            let (_, d2) = open_pair(positions, i, j);
            if d2 <= c2 {
                out.push((i, j));
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Corruption
// ---------------------------------------------------------------------------

/// Where the small regularizing noise is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RegNoiseMode {
    /// Only the clean conditioning view is perturbed; the corrupted view is
    /// built from the original positions. Default.
    #[default]
    CleanOnly,
    /// The regularized view becomes the base for both: corrupted = clean + ε.
    BothViews,
}

/// One corruption draw: the (possibly regularized) clean view, the corrupted
/// view, and the noise target ε.
#[derive(Debug, Clone)]
pub struct CorruptionSample {
    pub clean: AtomicStructure,
    pub corrupted: AtomicStructure,
    /// The denoising target: exactly `corrupted.positions - base.positions`,
    /// where base is the original structure (CleanOnly) or the clean view
    /// (BothViews).
    pub noise: Vec<[f64; 3]>,
}

pub fn corrupt(
    s: &AtomicStructure,
    sigma_corr: f64,
    sigma_reg: f64,
    rng: &mut impl Rng,
) -> Result<CorruptionSample, GeometryError> {
    corrupt_with_mode(s, sigma_corr, sigma_reg, RegNoiseMode::CleanOnly, rng)
}

pub fn corrupt_with_mode(
    s: &AtomicStructure,
    sigma_corr: f64,
    sigma_reg: f64,
    mode: RegNoiseMode,
    rng: &mut impl Rng,
) -> Result<CorruptionSample, GeometryError> {
    if !(sigma_corr >= 0.0 && sigma_corr.is_finite()) {
        return Err(GeometryError::BadSigma(sigma_corr));
    }
    if !(sigma_reg >= 0.0 && sigma_reg.is_finite()) {
        return Err(GeometryError::BadSigma(sigma_reg));
    }
    s.validate()?;
    let n = s.len();
    // ε is drawn first so the corruption target does not depend on whether
    // regularizing noise is enabled.
    let corr = Normal::new(0.0, sigma_corr).expect("validated sigma");
    let mut noise = vec![[0.0; 3]; n];
    for row in noise.iter_mut() {
        for v in row.iter_mut() {
            *v = corr.sample(rng);
        }
    }
    let mut clean = s.clone();
    if sigma_reg > 0.0 {
        let reg = Normal::new(0.0, sigma_reg).expect("validated sigma");
        for p in clean.positions.iter_mut() {
            for v in p.iter_mut() {
                *v += reg.sample(rng);
            }
        }
    }
    let base = match mode {
        RegNoiseMode::CleanOnly => &s.positions,
        RegNoiseMode::BothViews => &clean.positions,
    };
    let mut corrupted = s.clone();
    for (p, (b, e)) in corrupted.positions.iter_mut().zip(base.iter().zip(&noise)) {
        for k in 0..3 {
            p[k] = b[k] + e[k];
        }
    }
    Ok(CorruptionSample { clean, corrupted, noise })
}

// ---------------------------------------------------------------------------
// Augmentation and components
// ---------------------------------------------------------------------------

/// Randomly tile a periodic structure along lattice vectors.
///
/// Each iteration tiles once with probability `p` along a uniformly chosen
/// periodic axis; the process stops at the first failed draw or after
/// `max_repeats` doublings, so the repeat count is truncated-geometric and
/// the fraction of structures with at least one repeat is `p`.
/// Labels are dropped (they are invalidated by the size change).
pub fn cell_repeat_augment(
    s: &AtomicStructure,
    p: f64,
    max_repeats: usize,
    rng: &mut impl Rng,
) -> Result<AtomicStructure, GeometryError> {
    if !(0.0..=1.0).contains(&p) || !p.is_finite() {
        return Err(GeometryError::BadProbability(p));
    }
    s.validate()?;
    let axes: Vec<usize> = (0..3).filter(|&a| s.pbc[a]).collect();
    if axes.is_empty() || s.cell.is_none() {
        return Err(GeometryError::NotPeriodic);
    }
    let mut out = s.clone();
    out.labels = Labels::default();
    for _ in 0..max_repeats {
        if rng.gen_range(0.0..1.0) >= p {
            break;
        }
        let axis = axes[rng.gen_range(0..axes.len())];
        let shift = out.cell.expect("periodic")[axis];
        let n = out.len();
        for i in 0..n {
            let mut q = out.positions[i];
            for k in 0..3 {
                q[k] += shift[k];
            }
            out.positions.push(q);
            out.species.push(out.species[i]);
        }
        if let Some(tags) = out.tags.as_mut() {
            let copy = tags.clone();
            tags.extend(copy);
        }
        let cell = out.cell.as_mut().expect("periodic");
        for k in 0..3 {
            cell[axis][k] *= 2.0;
        }
    }
    Ok(out)
}

/// Extract the atoms carrying `tag`, preserving order. Returns the
/// substructure and the map from substructure index to parent index.
pub fn extract_component(
    s: &AtomicStructure,
    tag: ComponentTag,
) -> Result<(AtomicStructure, Vec<usize>), GeometryError> {
    s.validate()?;
    let tags = s.tags.as_ref().ok_or(GeometryError::MissingTags)?;
    let index_map: Vec<usize> = tags
        .iter()
        .enumerate()
        .filter(|(_, t)| **t == tag)
        .map(|(i, _)| i)
        .collect();
    if index_map.is_empty() {
        return Err(GeometryError::EmptyComponent { tag });
    }
    let sub = AtomicStructure {
        species: index_map.iter().map(|&i| s.species[i]).collect(),
        positions: index_map.iter().map(|&i| s.positions[i]).collect(),
        cell: s.cell,
        pbc: s.pbc,
        tags: None,
        labels: Labels::default(),
    };
    Ok((sub, index_map))
}

/// Convenience: a seeded corruption stream for `(seed, step, sample)`.
pub fn corruption_stream(seed: u64, step: u64, sample: u64) -> rand_chacha::ChaCha8Rng {
    rng::stream(seed, &[rng::tag::CORRUPT, step, sample])
}
