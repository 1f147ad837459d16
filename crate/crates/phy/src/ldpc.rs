//! Binary LDPC code: seeded column-weight-3 construction without length-4
//! cycles, systematic encoding, and sum-product belief propagation.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use issc_core::error::{Error, Result};

/// The shared rate-2/3 code, generated by [`construct`] with
/// `(648, 432, 3, ARTIFACT_SEED)` and stored so every run uses it.
pub const ARTIFACT: &str = include_str!("../data/ldpc_648_432.txt");
pub const ARTIFACT_SEED: u64 = 20230611;

#[derive(Clone, Debug)]
pub struct LdpcCode {
    pub n: usize,
    pub k: usize,
    pub m: usize,
    /// Variable indices of each check, ascending.
    pub checks: Vec<Vec<usize>>,
    /// Check indices of each variable, ascending.
    pub vars: Vec<Vec<usize>>,
    /// Row `i` holds the message bits that sum to parity bit `i`, packed.
    parity_rows: Vec<Vec<u64>>,
}

fn words(bits: usize) -> usize {
    bits.div_ceil(64)
}

fn get_bit(row: &[u64], i: usize) -> bool {
    row[i / 64] >> (i % 64) & 1 == 1
}

fn flip_bit(row: &mut [u64], i: usize) {
    row[i / 64] ^= 1 << (i % 64);
}

fn xor_into(dst: &mut [u64], src: &[u64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d ^= s;
    }
}

/// Pivot columns found by Gaussian elimination over GF(2), visiting columns in `order`.
fn pivot_columns(rows: &[Vec<u64>], order: &[usize]) -> Vec<usize> {
    let mut rows = rows.to_vec();
    let mut pivots = Vec::new();
    let mut r = 0;
    for &c in order {
        if r == rows.len() {
            break;
        }
        let Some(p) = (r..rows.len()).find(|&i| get_bit(&rows[i], c)) else { continue };
        rows.swap(r, p);
        let pivot = rows[r].clone();
        for (i, row) in rows.iter_mut().enumerate() {
            if i != r && get_bit(row, c) {
                xor_into(row, &pivot);
            }
        }
        pivots.push(c);
        r += 1;
    }
    pivots
}

impl LdpcCode {
    /// Builds the code from a check → variables adjacency whose last `m`
    /// columns form an invertible parity block.
    pub fn from_checks(n: usize, checks: Vec<Vec<usize>>) -> Result<Self> {
        let m = checks.len();
        if m == 0 || m >= n {
            return Err(Error::Config(format!("need 0 < m < n, got m={m} n={n}")));
        }
        let k = n - m;
        let mut vars = vec![Vec::new(); n];
        let mut dense = vec![vec![0u64; words(n)]; m];
        for (c, row) in checks.iter().enumerate() {
            for &v in row {
                if v >= n {
                    return Err(Error::Config(format!("check {c} references column {v} >= {n}")));
                }
                vars[v].push(c);
                flip_bit(&mut dense[c], v);
            }
        }
        // Gauss-Jordan on the parity block: afterwards row i reads [P_i | e_i].
        for i in 0..m {
            let col = k + i;
            let p = (i..m)
                .find(|&r| get_bit(&dense[r], col))
                .ok_or_else(|| Error::Config("parity block of H is singular".into()))?;
            dense.swap(i, p);
            let pivot = dense[i].clone();
            for (r, row) in dense.iter_mut().enumerate() {
                if r != i && get_bit(row, col) {
                    xor_into(row, &pivot);
                }
            }
        }
        let parity_rows = dense
            .iter()
            .map(|row| {
                let mut p = vec![0u64; words(k)];
                for j in (0..k).filter(|&j| get_bit(row, j)) {
                    flip_bit(&mut p, j);
                }
                p
            })
            .collect();
        let mut checks = checks;
        checks.iter_mut().for_each(|r| r.sort_unstable());
        Ok(LdpcCode { n, k, m, checks, vars, parity_rows })
    }

    /// The stored rate-2/3 code with n = 648.
    pub fn standard() -> Self {
        Self::parse(ARTIFACT).expect("bundled LDPC artifact is valid")
    }

    /// Reads the text artifact: an `m n` header, then one `row col` pair per nonzero.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
        let bad = |msg: &str| Error::Config(format!("LDPC artifact: {msg}"));
        let nums = |line: &str| -> Result<(usize, usize)> {
            let mut it = line.split_whitespace().map(str::parse::<usize>);
            match (it.next(), it.next(), it.next()) {
                (Some(Ok(a)), Some(Ok(b)), None) => Ok((a, b)),
                _ => Err(bad(&format!("malformed line {line:?}"))),
            }
        };
        let (m, n) = nums(lines.next().ok_or_else(|| bad("empty file"))?)?;
        let mut checks = vec![Vec::new(); m];
        for line in lines {
            let (r, c) = nums(line)?;
            checks.get_mut(r).ok_or_else(|| bad(&format!("row {r} >= {m}")))?.push(c);
        }
        Self::from_checks(n, checks)
    }

    pub fn to_artifact(&self) -> String {
        let mut s = format!("{} {}\n", self.m, self.n);
        for (r, row) in self.checks.iter().enumerate() {
            for c in row {
                writeln!(s, "{r} {c}").unwrap();
            }
        }
        s
    }

    pub fn rate(&self) -> f64 {
        self.k as f64 / self.n as f64
    }

    /// Systematic codeword `[msg | parity]`.
    pub fn encode(&self, msg: &[u8]) -> Vec<u8> {
        assert_eq!(msg.len(), self.k, "LDPC message must hold k bits");
        let mut packed = vec![0u64; words(self.k)];
        for (j, &b) in msg.iter().enumerate() {
            if b & 1 == 1 {
                flip_bit(&mut packed, j);
            }
        }
        let mut cw = msg.to_vec();
        cw.extend(self.parity_rows.iter().map(|p| {
            let ones: u32 = p.iter().zip(&packed).map(|(a, b)| (a & b).count_ones()).sum();
            (ones & 1) as u8
        }));
        cw
    }

    pub fn syndrome_is_zero(&self, bits: &[u8]) -> bool {
        self.checks.iter().all(|row| row.iter().fold(0u8, |acc, &v| acc ^ bits[v]) == 0)
    }

    /// Whether two columns share two or more checks.
    pub fn has_four_cycle(&self) -> bool {
        let mut seen = HashSet::new();
        for col in &self.vars {
            for a in 0..col.len() {
                for b in a + 1..col.len() {
                    if !seen.insert((col[a], col[b])) {
                        return true;
                    }
                }
            }
        }
        false
    }

    /// Sum-product decoding of channel LLRs (positive favours 0). Stops at
    /// the first zero syndrome. Returns hard decisions, convergence and the
    /// number of message-passing iterations run.
    pub fn decode(&self, llr: &[f64], max_iters: usize) -> (Vec<u8>, bool, usize) {
        assert_eq!(llr.len(), self.n, "LDPC decoder needs n LLRs");
        let hard = |total: &[f64]| total.iter().map(|&l| u8::from(l < 0.0)).collect::<Vec<u8>>();
        let mut bits = hard(llr);
        if self.syndrome_is_zero(&bits) {
            return (bits, true, 0);
        }
        // Edge e = position within the check's row, flattened.
        let offsets: Vec<usize> = std::iter::once(0)
            .chain(self.checks.iter().scan(0, |acc, r| {
                *acc += r.len();
                Some(*acc)
            }))
            .collect();
        let edge_var: Vec<usize> = self.checks.iter().flatten().copied().collect();
        let ne = edge_var.len();
        let mut c2v = vec![0.0f64; ne];
        let mut v2c = vec![0.0f64; ne];
        let mut total = llr.to_vec();
        let mut t = Vec::new();
        const CLIP: f64 = 1.0 - 1e-15;
        for iter in 1..=max_iters {
            for e in 0..ne {
                v2c[e] = total[edge_var[e]] - c2v[e];
            }
            for c in 0..self.m {
                let (lo, hi) = (offsets[c], offsets[c + 1]);
                t.clear();
                t.extend(v2c[lo..hi].iter().map(|&x| (x / 2.0).tanh()));
                // products excluding each edge via prefix/suffix sweeps
                let deg = hi - lo;
                let mut prefix = 1.0;
                for i in 0..deg {
                    c2v[lo + i] = prefix;
                    prefix *= t[i];
                }
                let mut suffix = 1.0;
                for i in (0..deg).rev() {
                    let p = (c2v[lo + i] * suffix).clamp(-CLIP, CLIP);
                    c2v[lo + i] = 2.0 * p.atanh();
                    suffix *= t[i];
                }
            }
            total.copy_from_slice(llr);
            for e in 0..ne {
                total[edge_var[e]] += c2v[e];
            }
            bits = hard(&total);
            if self.syndrome_is_zero(&bits) {
                return (bits, true, iter);
            }
        }
        (bits, false, max_iters)
    }
}

/// Seeded construction of an `(n, k)` code with the given column weight:
/// each column joins the least-used checks that keep the Tanner graph free
/// of 4-cycles; attempts repeat until H has full rank, then columns are
/// reordered so the pivot (parity) columns come last.
pub fn construct(n: usize, k: usize, col_weight: usize, seed: u64) -> Result<LdpcCode> {
    let m = n - k;
    for attempt in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(attempt);
        let mut degree = vec![0usize; m];
        let mut pairs: HashSet<(usize, usize)> = HashSet::new();
        let mut cols: Vec<Vec<usize>> = Vec::with_capacity(n);
        let mut ok = true;
        'columns: for _ in 0..n {
            let mut chosen: Vec<usize> = Vec::with_capacity(col_weight);
            for _ in 0..col_weight {
                let allowed: Vec<usize> = (0..m)
                    .filter(|c| !chosen.contains(c))
                    .filter(|&c| chosen.iter().all(|&d| !pairs.contains(&(c.min(d), c.max(d)))))
                    .collect();
                let Some(min_deg) = allowed.iter().map(|&c| degree[c]).min() else {
                    ok = false;
                    break 'columns;
                };
                let best: Vec<usize> = allowed.into_iter().filter(|&c| degree[c] == min_deg).collect();
                chosen.push(*best.choose(&mut rng).expect("nonempty"));
            }
            for a in 0..chosen.len() {
                for b in a + 1..chosen.len() {
                    pairs.insert((chosen[a].min(chosen[b]), chosen[a].max(chosen[b])));
                }
            }
            for &c in &chosen {
                degree[c] += 1;
            }
            cols.push(chosen);
        }
        if !ok {
            continue;
        }
        cols.shuffle(&mut rng);
        let mut dense = vec![vec![0u64; words(n)]; m];
        for (j, col) in cols.iter().enumerate() {
            for &c in col {
                flip_bit(&mut dense[c], j);
            }
        }
        let order: Vec<usize> = (0..n).rev().collect();
        let pivots = pivot_columns(&dense, &order);
        if pivots.len() < m {
            continue;
        }
        let pivot_set: HashSet<usize> = pivots.iter().copied().collect();
        let mut perm: Vec<usize> = (0..n).filter(|j| !pivot_set.contains(j)).collect();
        let mut parity: Vec<usize> = pivots;
        parity.sort_unstable();
        perm.extend(parity);
        let mut checks = vec![Vec::new(); m];
        for (new_j, &old_j) in perm.iter().enumerate() {
            for &c in &cols[old_j] {
                checks[c].push(new_j);
            }
        }
        return LdpcCode::from_checks(n, checks);
    }
    Err(Error::Config(format!("no full-rank ({n},{k}) code found")))
}

/// Seeded permutation of coded bits across all blocks of a frame.
#[derive(Clone, Debug)]
pub struct Interleaver {
    perm: Vec<usize>,
}

impl Interleaver {
    pub fn new(len: usize, seed: u64) -> Self {
        let mut perm: Vec<usize> = (0..len).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Interleaver { perm }
    }

    pub fn interleave<T: Copy>(&self, x: &[T]) -> Vec<T> {
        self.perm.iter().map(|&p| x[p]).collect()
    }

    pub fn deinterleave<T: Copy + Default>(&self, y: &[T]) -> Vec<T> {
        let mut x = vec![T::default(); y.len()];
        for (i, &p) in self.perm.iter().enumerate() {
            x[p] = y[i];
        }
        x
    }
}
