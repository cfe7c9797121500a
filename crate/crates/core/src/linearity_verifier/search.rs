use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::conditions::{check_conditions, Hypothesis, PageTableOracles};
use super::layout::AddressLayout;
use crate::cache_model::ActorId;
use crate::error::{Error, Result};
use crate::os_model::{Action, AdversaryScript};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Also require page p+1 to sit right after page p (no wrap).
    pub affinity: bool,
    /// Stop each first-level branch after this many solutions.
    pub max_results: Option<usize>,
    pub parallel: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig { affinity: false, max_results: None, parallel: true }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchResult {
    /// Satisfying page -> frame tables that are not affine, sorted.
    pub nonlinear: Vec<Vec<u64>>,
    /// Satisfying affine tables, sorted.
    pub affine: Vec<Vec<u64>>,
    /// False when a result cap cut the enumeration short.
    pub complete: bool,
    pub nodes: u64,
}

impl SearchResult {
    pub fn solutions(&self) -> usize {
        self.nonlinear.len() + self.affine.len()
    }
}

/// frames[p] = (a*p + b) mod F for some a, b.
pub fn is_affine(frames: &[u64], n_frames: u64) -> bool {
    if frames.len() < 2 {
        return true;
    }
    let b = frames[0];
    let a = (frames[1] + n_frames - b) % n_frames;
    frames.iter().enumerate().all(|(p, &f)| (a * p as u64 + b) % n_frames == f)
}

struct Problem {
    n: usize,
    /// compat[(p * F + c) * n + q]: frames q may take once p has frame c.
    compat: Vec<u64>,
    unary: Vec<u64>,
    frames: usize,
}

impl Problem {
    #[inline]
    fn compat(&self, p: usize, c: usize, q: usize) -> u64 {
        self.compat[(p * self.frames + c) * self.n + q]
    }
}

/// Every pairwise observation between addresses of pages p (frame c) and
/// q (frame d) matches what PA = VA predicts.
fn pair_ok(l: &AddressLayout, n: usize, affinity: bool, p: usize, c: usize, q: usize, d: usize) -> bool {
    let pb = l.page_bits;
    let ps = l.page_size();
    let end = (n as u64) << pb;
    if p != q && c == d {
        return false;
    }
    let alias_mask = (1u64 << l.alias_bits) - 1;
    for a in 0..ps {
        let vi = ((p as u64) << pb) | a;
        let pi = ((c as u64) << pb) | a;
        for b in 0..ps {
            let vj = ((q as u64) << pb) | b;
            let pj = ((d as u64) << pb) | b;
            if vi == vj {
                continue;
            }
            if (vi ^ vj) & alias_mask == 0 && !l.alias(pi, pj) {
                return false;
            }
            if l.set_index(vi) == l.set_index(vj) && l.set_index(pi) != l.set_index(pj) {
                return false;
            }
            if l.bank(vi) == l.bank(vj) && l.conflicts(pi, pj) != (l.row(vi) != l.row(vj)) {
                return false;
            }
            if vj == vi + 1 && l.conflicts(pi, pj) != l.at_boundary(vi) {
                return false;
            }
            if vi == 0 && vj == end - 1 && l.conflicts(pi, pj) != l.conflicts(vi, vj) {
                return false;
            }
        }
    }
    if affinity && q == p + 1 && d != c + 1 {
        return false;
    }
    true
}

fn build(l: &AddressLayout, n: usize, affinity: bool) -> Problem {
    let f = l.frames() as usize;
    let mut compat = vec![0u64; n * f * n];
    let mut unary = vec![0u64; n];
    for p in 0..n {
        for c in 0..f {
            if pair_ok(l, n, affinity, p, c, p, c) {
                unary[p] |= 1 << c;
            }
        }
    }
    for p in 0..n {
        for q in (p + 1)..n {
            for c in 0..f {
                for d in 0..f {
                    if pair_ok(l, n, affinity, p, c, q, d) && pair_ok(l, n, affinity, q, d, p, c) {
                        compat[(p * f + c) * n + q] |= 1 << d;
                        compat[(q * f + d) * n + p] |= 1 << c;
                    }
                }
            }
        }
    }
    Problem { n, compat, unary, frames: f }
}

const UNASSIGNED: u8 = u8::MAX;

#[derive(Clone)]
struct State {
    doms: Vec<u64>,
    assign: Vec<u8>,
}

impl State {
    /// Assign p = c, filter the other domains, then keep assigning any
    /// domain that shrank to one value. False on a wipe-out.
    fn assign(&mut self, pr: &Problem, p: usize, c: usize) -> bool {
        let mut queue = vec![(p, c)];
        while let Some((p, c)) = queue.pop() {
            if self.assign[p] != UNASSIGNED {
                if self.assign[p] as usize != c {
                    return false;
                }
                continue;
            }
            if self.doms[p] >> c & 1 == 0 {
                return false;
            }
            self.assign[p] = c as u8;
            self.doms[p] = 1 << c;
            for q in 0..pr.n {
                if q == p {
                    continue;
                }
                let nd = self.doms[q] & pr.compat(p, c, q);
                if nd == 0 {
                    return false;
                }
                if self.assign[q] == UNASSIGNED && nd != self.doms[q] && nd.count_ones() == 1 {
                    queue.push((q, nd.trailing_zeros() as usize));
                }
                self.doms[q] = nd;
            }
        }
        true
    }

    fn pick(&self) -> Option<usize> {
        (0..self.doms.len())
            .filter(|&p| self.assign[p] == UNASSIGNED)
            .min_by_key(|&p| (self.doms[p].count_ones(), p))
    }
}

fn solve(pr: &Problem, st: State, out: &mut Vec<Vec<u64>>, cap: usize, nodes: &mut u64) -> bool {
    *nodes += 1;
    let Some(p) = st.pick() else {
        out.push(st.assign.iter().map(|&c| c as u64).collect());
        return out.len() < cap;
    };
    let mut dom = st.doms[p];
    while dom != 0 {
        let c = dom.trailing_zeros() as usize;
        dom &= dom - 1;
        let mut next = st.clone();
        if next.assign(pr, p, c) && !solve(pr, next, out, cap, nodes) {
            return false;
        }
    }
    true
}

/// Enumerate page -> frame tables over `n_pages` pages of a miniature
/// layout that pass all five conditions under PA = VA.
pub fn search_nonlinear(layout: &AddressLayout, n_pages: usize, cfg: &SearchConfig) -> Result<SearchResult> {
    let frames = layout.frames() as usize;
    if frames > 64 || n_pages > frames || n_pages == 0 {
        return Err(Error::Config(format!(
            "search needs 1..={frames} pages and at most 64 frames (got {n_pages} pages, {frames} frames)"
        )));
    }
    let pr = build(layout, n_pages, cfg.affinity);
    let root = State { doms: pr.unary.clone(), assign: vec![UNASSIGNED; n_pages] };
    if root.doms.contains(&0) {
        return Ok(SearchResult { nonlinear: vec![], affine: vec![], complete: true, nodes: 1 });
    }
    let cap = cfg.max_results.unwrap_or(usize::MAX);
    let p0 = root.pick().expect("at least one page");
    let branches: Vec<usize> = (0..frames).filter(|&c| root.doms[p0] >> c & 1 == 1).collect();
    let run = |c: &usize| {
        let mut out = Vec::new();
        let mut nodes = 0;
        let mut st = root.clone();
        let full = if st.assign(&pr, p0, *c) { solve(&pr, st, &mut out, cap, &mut nodes) } else { true };
        (out, nodes, full)
    };
    let parts: Vec<(Vec<Vec<u64>>, u64, bool)> =
        if cfg.parallel { branches.par_iter().map(run).collect() } else { branches.iter().map(run).collect() };

    let mut all = Vec::new();
    let mut nodes = 1;
    let mut complete = true;
    for (o, n, full) in parts {
        all.extend(o);
        nodes += n;
        complete &= full;
    }
    all.sort();
    all.dedup();
    let (affine, nonlinear): (Vec<_>, Vec<_>) = all.into_iter().partition(|m| is_affine(m, frames as u64));
    Ok(SearchResult { nonlinear, affine, complete, nodes })
}

/// Replays a found table through the five condition checks.
pub fn revalidate(layout: &AddressLayout, frames: &[u64]) -> bool {
    let o = PageTableOracles::from_frames(layout.clone(), frames);
    check_conditions(&o, frames.len() as u64, Hypothesis::identity()).all_pass()
}

/// Swaps that turn a linear region (page p on frame base + p) into `frames`.
pub fn to_adversary_script(actor: ActorId, frames: &[u64]) -> AdversaryScript {
    let mut cur: Vec<u64> = (0..frames.len() as u64).collect();
    let mut actions = Vec::new();
    for p in 0..frames.len() {
        if cur[p] != frames[p] {
            if let Some(q) = (p + 1..frames.len()).find(|&q| cur[q] == frames[p]) {
                cur.swap(p, q);
                actions.push(Action::SwapPair { actor, vpn_a: p as u64, vpn_b: q as u64 });
            }
        }
    }
    AdversaryScript::new(actions)
}
