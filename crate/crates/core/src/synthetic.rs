//! Deterministic synthetic dataset families.
//!
//! Each family plants one falsifiable mechanism at desk scale:
//!
//! * `conformer_pairs` — molecules with two well-separated conformers of
//!   identical composition; a denoiser that cannot tell which conformer a
//!   corrupted geometry came from faces an ambiguous target, one conditioned
//!   on the clean view does not.
//! * `morse_clusters` — random clusters labeled with the exact analytic
//!   energy and forces of a pairwise Morse potential, so force/energy
//!   training has a ground truth with zero label noise.
//! * `toy_crystals` — small periodic checkerboard crystals with a density
//!   scalar, exercising lattice handling and periodic neighbor graphs.
//! * `pair_complexes` — two-component structures where each B atom sits at
//!   the midpoint of a pair of A atoms. A determines B exactly, while B
//!   leaves A underdetermined: the planted one-way dependence that makes the
//!   embed-A-denoise-B direction strictly easier than the reverse.
//!
//! All positions are quantized to a 1/65536 Å grid. The grid is invisible at
//! training scales but makes translated copies of a structure bit-exact,
//! which the invariance tests rely on.

use crate::geometry::{AtomicStructure, ComponentTag};
use crate::rng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::str::FromStr;

/// Morse well depth.
pub const MORSE_D: f64 = 1.0;
/// Morse width parameter.
pub const MORSE_A: f64 = 1.5;
/// Morse equilibrium distance, Å.
pub const MORSE_RE: f64 = 1.5;

const GRID: f64 = 65536.0;

/// Snap to the dyadic 1/65536 Å grid (exactly representable in f64, so
/// adding another dyadic value is exact).
pub fn quantize(x: f64) -> f64 {
    (x * GRID).round() / GRID
}

fn quantize_all(positions: &mut [[f64; 3]]) {
    for p in positions {
        for v in p.iter_mut() {
            *v = quantize(*v);
        }
    }
}

/// Plain root-mean-square deviation between two conformations, no alignment.
pub fn rmsd(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    assert_eq!(a.len(), b.len());
    let ss: f64 = a
        .iter()
        .zip(b)
        .map(|(p, q)| (0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>())
        .sum();
    (ss / a.len() as f64).sqrt()
}

// ---------------------------------------------------------------------------
// Family registry
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FamilyKind {
    ConformerPairs,
    MorseClusters,
    ToyCrystals,
    PairComplexes,
}

impl FamilyKind {
    pub const ALL: [FamilyKind; 4] = [
        FamilyKind::ConformerPairs,
        FamilyKind::MorseClusters,
        FamilyKind::ToyCrystals,
        FamilyKind::PairComplexes,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            FamilyKind::ConformerPairs => "conformer_pairs",
            FamilyKind::MorseClusters => "morse_clusters",
            FamilyKind::ToyCrystals => "toy_crystals",
            FamilyKind::PairComplexes => "pair_complexes",
        }
    }

    /// Stream-tag component, so equal seeds give unrelated draws per family.
    fn ordinal(&self) -> u64 {
        match self {
            FamilyKind::ConformerPairs => 0,
            FamilyKind::MorseClusters => 1,
            FamilyKind::ToyCrystals => 2,
            FamilyKind::PairComplexes => 3,
        }
    }
}

impl FromStr for FamilyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FamilyKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = FamilyKind::ALL.iter().map(|k| k.name()).collect();
                format!("unknown family '{s}' (expected one of: {})", names.join(", "))
            })
    }
}

/// Generate `n` units of the family (for `conformer_pairs`, `n` molecules,
/// hence `2n` frames; one frame per unit otherwise).
pub fn generate(kind: FamilyKind, n: usize, seed: u64) -> Vec<AtomicStructure> {
    match kind {
        FamilyKind::ConformerPairs => conformer_pairs(n, seed),
        FamilyKind::MorseClusters => morse_clusters(n, seed),
        FamilyKind::ToyCrystals => toy_crystals(n, seed),
        FamilyKind::PairComplexes => pair_complexes(n, seed),
    }
}

fn item_stream(kind: FamilyKind, seed: u64, index: usize) -> ChaCha8Rng {
    rng::stream(seed, &[rng::tag::DATA, kind.ordinal(), index as u64])
}

/// Sequential rejection sampling of `k` points in a cube with a minimum
/// pairwise distance; the cube grows when placement stalls, keeping the
/// procedure total and deterministic.
fn random_cluster(r: &mut ChaCha8Rng, k: usize, min_dist: f64, mut side: f64) -> Vec<[f64; 3]> {
    let mut out: Vec<[f64; 3]> = Vec::with_capacity(k);
    let mut failures = 0;
    while out.len() < k {
        let p = [
            r.gen_range(-side / 2.0..side / 2.0),
            r.gen_range(-side / 2.0..side / 2.0),
            r.gen_range(-side / 2.0..side / 2.0),
        ];
        let ok = out.iter().all(|q| {
            let d2: f64 = (0..3).map(|i| (p[i] - q[i]).powi(2)).sum();
            d2 >= min_dist * min_dist
        });
        if ok {
            out.push(p);
            failures = 0;
        } else {
            failures += 1;
            if failures >= 200 {
                side *= 1.15;
                failures = 0;
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// conformer_pairs
// ---------------------------------------------------------------------------

/// Default per-atom RMS separation between the two conformers of a molecule.
pub const CONFORMER_DEFORMATION: f64 = 0.35;

/// `molecules` molecules, two frames each (frames `2i` and `2i+1` are the
/// conformer pair). Conformer B is A under a collective breathing
/// deformation — a radial dilation (or contraction, per-molecule sign)
/// about the centroid — scaled to an exact RMSD of `deformation` before
/// grid snapping. A coherent mode rather than independent per-atom jitter:
/// the two conformers are then related the way low-frequency conformational
/// changes relate real geometries, and whether a corrupted frame came from
/// A or B is a global, noise-limited question instead of a per-atom one.
pub fn conformer_pairs_with(molecules: usize, seed: u64, deformation: f64) -> Vec<AtomicStructure> {
    assert!(deformation > 0.0);
    let mut frames = Vec::with_capacity(molecules * 2);
    for m in 0..molecules {
        let mut r = item_stream(FamilyKind::ConformerPairs, seed, m);
        let k = 3;
        let species: Vec<u8> = (0..k).map(|_| [6u8, 7, 8][r.gen_range(0..3)]).collect();
        let side = 1.45 * (k as f64).cbrt() * 1.15;
        let mut base = random_cluster(&mut r, k, 1.15, side);
        let sign = if r.gen::<bool>() { 1.0 } else { -1.0 };

        quantize_all(&mut base);
        let kf = k as f64;
        let centroid = base.iter().fold([0.0; 3], |acc, p| {
            [acc[0] + p[0] / kf, acc[1] + p[1] / kf, acc[2] + p[2] / kf]
        });
        let rms_r = (base
            .iter()
            .map(|p| {
                (p[0] - centroid[0]).powi(2)
                    + (p[1] - centroid[1]).powi(2)
                    + (p[2] - centroid[2]).powi(2)
            })
            .sum::<f64>()
            / kf)
            .sqrt();
        // |gamma - 1| * rms_r = deformation, so the A-B RMSD is exact
        // before grid snapping.
        let gamma = 1.0 + sign * deformation / rms_r;
        let mut other: Vec<[f64; 3]> = base
            .iter()
            .map(|p| {
                [
                    centroid[0] + gamma * (p[0] - centroid[0]),
                    centroid[1] + gamma * (p[1] - centroid[1]),
                    centroid[2] + gamma * (p[2] - centroid[2]),
                ]
            })
            .collect();
        quantize_all(&mut other);

        frames.push(AtomicStructure::new(species.clone(), base));
        frames.push(AtomicStructure::new(species, other));
    }
    frames
}

pub fn conformer_pairs(molecules: usize, seed: u64) -> Vec<AtomicStructure> {
    conformer_pairs_with(molecules, seed, CONFORMER_DEFORMATION)
}

// ---------------------------------------------------------------------------
// morse_clusters
// ---------------------------------------------------------------------------

/// Total energy and analytic forces of the pairwise Morse potential
/// `E = Σ_{i<j} D·(1 − exp(−a(r_ij − re)))²`. The force on each atom is the
/// hand-written negative gradient, not a numerical derivative, and each
/// pair's equal-and-opposite contributions are the same f64 value, so
/// Newton's third law holds to accumulation roundoff.
pub fn morse_energy_forces(positions: &[[f64; 3]]) -> (f64, Vec<[f64; 3]>) {
    let n = positions.len();
    let mut energy = 0.0;
    let mut forces = vec![[0.0; 3]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = [
                positions[i][0] - positions[j][0],
                positions[i][1] - positions[j][1],
                positions[i][2] - positions[j][2],
            ];
            let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            let e = (-MORSE_A * (r - MORSE_RE)).exp();
            let one_minus = 1.0 - e;
            energy += MORSE_D * one_minus * one_minus;
            // dE/dr = 2·D·a·(1 − e)·e ; force on i is −dE/dr · d/r.
            let dedr = 2.0 * MORSE_D * MORSE_A * one_minus * e;
            let coef = dedr / r;
            for k in 0..3 {
                let g = coef * d[k];
                forces[i][k] -= g;
                forces[j][k] += g;
            }
        }
    }
    (energy, forces)
}

/// Random clusters of `min_atoms..=max_atoms` atoms on the dyadic grid, with
/// exact Morse energy and force labels computed from the stored (quantized)
/// positions.
pub fn morse_clusters_sized(
    n: usize,
    seed: u64,
    min_atoms: usize,
    max_atoms: usize,
) -> Vec<AtomicStructure> {
    assert!(min_atoms >= 2 && min_atoms <= max_atoms);
    (0..n)
        .map(|i| {
            let mut r = item_stream(FamilyKind::MorseClusters, seed, i);
            let k = r.gen_range(min_atoms..=max_atoms);
            let species: Vec<u8> = (0..k).map(|_| [6u8, 8][r.gen_range(0..2)]).collect();
            let side = 1.8 * (k as f64).cbrt();
            let mut positions = random_cluster(&mut r, k, 1.25, side);
            quantize_all(&mut positions);
            let (energy, forces) = morse_energy_forces(&positions);
            let mut s = AtomicStructure::new(species, positions);
            s.labels.energy = Some(energy);
            s.labels.forces = Some(forces);
            s
        })
        .collect()
}

pub fn morse_clusters(n: usize, seed: u64) -> Vec<AtomicStructure> {
    morse_clusters_sized(n, seed, 4, 8)
}

// ---------------------------------------------------------------------------
// toy_crystals
// ---------------------------------------------------------------------------

/// Periodic checkerboard crystals: an `nx×ny×nz` grid of alternating cation/
/// anion sites with small jitter, labeled with the number density `N/V`.
pub fn toy_crystals(n: usize, seed: u64) -> Vec<AtomicStructure> {
    const PAIRS: [(u8, u8); 3] = [(11, 17), (3, 9), (19, 35)];
    (0..n)
        .map(|i| {
            let mut r = item_stream(FamilyKind::ToyCrystals, seed, i);
            let pitch = r.gen_range(2.0..2.6);
            let reps = [r.gen_range(2..=3usize), r.gen_range(2..=3usize), r.gen_range(2..=3usize)];
            let (za, zb) = PAIRS[r.gen_range(0..PAIRS.len())];
            let jitter = Normal::new(0.0, 0.03).expect("jitter scale");
            let mut species = Vec::new();
            let mut positions = Vec::new();
            for ix in 0..reps[0] {
                for iy in 0..reps[1] {
                    for iz in 0..reps[2] {
                        species.push(if (ix + iy + iz) % 2 == 0 { za } else { zb });
                        positions.push([
                            (ix as f64 + 0.5) * pitch + jitter.sample(&mut r),
                            (iy as f64 + 0.5) * pitch + jitter.sample(&mut r),
                            (iz as f64 + 0.5) * pitch + jitter.sample(&mut r),
                        ]);
                    }
                }
            }
            quantize_all(&mut positions);
            let cell = [
                [reps[0] as f64 * pitch, 0.0, 0.0],
                [0.0, reps[1] as f64 * pitch, 0.0],
                [0.0, 0.0, reps[2] as f64 * pitch],
            ];
            let volume = cell[0][0] * cell[1][1] * cell[2][2];
            let mut s = AtomicStructure::new(species, positions);
            s.cell = Some(cell);
            s.pbc = [true; 3];
            let n_atoms = s.len() as f64;
            s.labels.scalars.insert("density".into(), n_atoms / volume);
            s
        })
        .collect()
}

// ---------------------------------------------------------------------------
// pair_complexes
// ---------------------------------------------------------------------------

/// The planted dependence: B atom `j` is the midpoint of A atoms `2j` and
/// `2j+1`. Knowing A fixes B exactly; knowing B leaves each A pair free to
/// rotate about its midpoint, so the reverse direction stays ambiguous.
pub fn pair_complex_b(a_positions: &[[f64; 3]]) -> Vec<[f64; 3]> {
    assert!(a_positions.len() % 2 == 0, "A component needs an even atom count");
    a_positions
        .chunks_exact(2)
        .map(|pair| {
            [
                (pair[0][0] + pair[1][0]) / 2.0,
                (pair[0][1] + pair[1][1]) / 2.0,
                (pair[0][2] + pair[1][2]) / 2.0,
            ]
        })
        .collect()
}

/// Two-component structures: a random carbon cluster (component A, even
/// size) plus oxygen atoms at the pairwise midpoints (component B).
pub fn pair_complexes(n: usize, seed: u64) -> Vec<AtomicStructure> {
    (0..n)
        .map(|i| {
            let mut r = item_stream(FamilyKind::PairComplexes, seed, i);
            let ma = [6usize, 8][r.gen_range(0..2)];
            let side = 1.55 * (ma as f64).cbrt();
            let mut a = random_cluster(&mut r, ma, 1.3, side);
            quantize_all(&mut a);
            // Midpoints of grid points are exact multiples of half the grid
            // step, so B needs no re-quantization to stay dyadic.
            let b = pair_complex_b(&a);
            let mb = b.len();
            let mut species = vec![6u8; ma];
            species.extend(std::iter::repeat(8u8).take(mb));
            let mut positions = a;
            positions.extend(b);
            let mut s = AtomicStructure::new(species, positions);
            let mut tags = vec![ComponentTag::A; ma];
            tags.extend(std::iter::repeat(ComponentTag::B).take(mb));
            s.tags = Some(tags);
            s
        })
        .collect()
}
