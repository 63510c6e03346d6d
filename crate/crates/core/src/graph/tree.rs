//! Regular trees as reduced words, and reflections through a geodesic.
//!
//! The degree-`r` tree is realized as the Cayley graph of the free product of
//! `r` involutions: vertices are words over `{0..r-1}` with no two adjacent
//! equal letters, the origin is the empty word, and multiplying by a letter
//! either appends it or cancels the trailing copy. Distance is word length
//! after cancellation, so everything is closed form.

use std::collections::HashMap;
use std::sync::Mutex;

/// Hard cap on word length; a desk-scale walk never approaches this.
pub const MAX_WORD_LEN: usize = 1 << 16;

pub type Word = Vec<u8>;

/// One reduced multiplication: append `letter` or cancel a trailing copy.
pub fn apply_letter(w: &mut Word, letter: u8) {
    if w.last() == Some(&letter) {
        w.pop();
    } else {
        w.push(letter);
        assert!(w.len() <= MAX_WORD_LEN, "tree word exceeded length cap");
    }
}

pub fn is_reduced(w: &[u8], r: u8) -> bool {
    w.iter().all(|&c| c < r) && w.windows(2).all(|p| p[0] != p[1])
}

fn lcp_len(a: &[u8], b: &[u8]) -> usize {
    a.iter().zip(b.iter()).take_while(|(x, y)| x == y).count()
}

/// Graph distance between two reduced words.
pub fn distance(a: &[u8], b: &[u8]) -> u64 {
    let m = lcp_len(a, b);
    (a.len() - m + b.len() - m) as u64
}

/// The letter sequence moving from `a` to `b` along the geodesic:
/// cancel down to the meet, then spell the rest of `b`.
fn moves(a: &[u8], b: &[u8]) -> Vec<u8> {
    let m = lcp_len(a, b);
    let mut out: Vec<u8> = a[m..].iter().rev().copied().collect();
    out.extend_from_slice(&b[m..]);
    out
}

/// Vertices of the geodesic from `a` to `b`, inclusive.
fn geodesic(a: &[u8], b: &[u8]) -> Vec<Word> {
    let m = lcp_len(a, b);
    let mut out = Vec::with_capacity(a.len() + b.len() - 2 * m + 1);
    let mut cur: Word = a.to_vec();
    out.push(cur.clone());
    for _ in m..a.len() {
        cur.pop();
        out.push(cur.clone());
    }
    for &c in &b[m..] {
        cur.push(c);
        out.push(cur.clone());
    }
    out
}

/// The tree automorphism that swaps `x` and `w`, realized as the reflection
/// through the midpoint of their geodesic.
///
/// The geodesic is mapped onto itself reversed. A vertex off the path is
/// reattached at the mirrored path vertex, with local edge choices matched by
/// rank among the letters not used by the path. Images are computed on demand
/// and memoized, so only the finitely many sites a simulation touches are
/// ever materialized.
#[derive(Debug)]
pub struct TreeReflection {
    r: u8,
    path: Vec<Word>,
    memo: Mutex<HashMap<Word, Word>>,
}

impl TreeReflection {
    pub fn new(r: u8, x: &[u8], w: &[u8]) -> Self {
        TreeReflection {
            r,
            path: geodesic(x, w),
            memo: Mutex::new(HashMap::new()),
        }
    }

    /// Letters connecting path vertex `j` to its path neighbors.
    fn path_letters(&self, j: usize) -> Vec<u8> {
        let mut out = Vec::with_capacity(2);
        let p = &self.path[j];
        for adj in [j.wrapping_sub(1), j + 1] {
            if let Some(q) = self.path.get(adj) {
                // Neighbor is either the parent (cancel trailing letter) or a
                // one-letter extension.
                let letter = if q.len() + 1 == p.len() {
                    *p.last().unwrap()
                } else {
                    *q.last().unwrap()
                };
                out.push(letter);
            }
        }
        out
    }

    fn off_letters(&self, j: usize) -> Vec<u8> {
        let used = self.path_letters(j);
        (0..self.r).filter(|c| !used.contains(c)).collect()
    }

    pub fn apply(&self, v: &[u8]) -> Word {
        if let Some(hit) = self.memo.lock().unwrap().get(v) {
            return hit.clone();
        }
        let k = self.path.len() - 1;
        // Projection of v onto the path: the unique nearest path vertex.
        let (j, _) = self
            .path
            .iter()
            .enumerate()
            .map(|(i, p)| (i, distance(p, v)))
            .min_by_key(|&(_, d)| d)
            .unwrap();
        let src_moves = moves(&self.path[j], v);
        let mut dst_moves = Vec::with_capacity(src_moves.len());
        for (i, &c) in src_moves.iter().enumerate() {
            let (avail_src, avail_dst): (Vec<u8>, Vec<u8>) = if i == 0 {
                (self.off_letters(j), self.off_letters(k - j))
            } else {
                let block_src = src_moves[i - 1];
                let block_dst = dst_moves[i - 1];
                (
                    (0..self.r).filter(|&a| a != block_src).collect(),
                    (0..self.r).filter(|&a| a != block_dst).collect(),
                )
            };
            let rank = avail_src
                .iter()
                .position(|&a| a == c)
                .expect("off-path move letter must avoid the path/backtrack");
            dst_moves.push(avail_dst[rank]);
        }
        let mut image = self.path[k - j].clone();
        for &c in &dst_moves {
            apply_letter(&mut image, c);
        }
        self.memo.lock().unwrap().insert(v.to_vec(), image.clone());
        image
    }
}
