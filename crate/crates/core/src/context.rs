//! Analysis contexts and the context constructors.
//!
//! A context pairs the public function being executed with a bounded list of
//! private blocks (most recent first). `merge` computes the context of the
//! successor of a block transition.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::bytecode::BlockId;
use crate::local::PatternFacts;

#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Context {
    pub public_part: Option<BlockId>,
    /// Most recent first.
    pub private_part: Vec<BlockId>,
}

impl Context {
    /// The context every analysis starts from.
    pub fn initial() -> Context {
        Context::default()
    }

    pub fn new(public_part: Option<BlockId>, private_part: Vec<BlockId>) -> Context {
        Context { public_part, private_part }
    }
}

impl fmt::Display for Context {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.public_part {
            Some(b) => write!(f, "<{b}|")?,
            None => write!(f, "<Null|")?,
        }
        let parts: Vec<String> = self.private_part.iter().map(|b| b.to_string()).collect();
        write!(f, "[{}]>", parts.join(", "))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Shrinking,
    ShrinkingImportantEdges,
    Transactional,
}

impl Scheme {
    pub fn default_depth(self) -> usize {
        match self {
            Scheme::Shrinking | Scheme::ShrinkingImportantEdges => 20,
            Scheme::Transactional => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SchemeConfig {
    pub scheme: Scheme,
    pub depth: usize,
}

impl SchemeConfig {
    pub fn new(scheme: Scheme, depth: usize) -> SchemeConfig {
        assert!(depth >= 1, "context depth must be positive");
        SchemeConfig { scheme, depth }
    }

    pub fn with_default_depth(scheme: Scheme) -> SchemeConfig {
        SchemeConfig::new(scheme, scheme.default_depth())
    }
}

/// Call/return facts that drive context construction.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfirmedFacts {
    /// `(block, target)`: the transition enters a public function.
    pub public_calls: BTreeSet<(BlockId, BlockId)>,
    /// `(caller, continuation)`: the caller likely calls a private function
    /// having pushed `continuation`.
    pub private_calls: BTreeSet<(BlockId, BlockId)>,
    pub private_returns: BTreeSet<BlockId>,
    pub important_edges: BTreeSet<(BlockId, BlockId)>,
}

impl ConfirmedFacts {
    /// Treats every locally detected candidate as confirmed. Used when the
    /// pre-analysis is skipped.
    pub fn from_candidates(candidates: &PatternFacts) -> ConfirmedFacts {
        ConfirmedFacts {
            public_calls: candidates.public_call_candidates.iter().map(|c| (c.block, c.target)).collect(),
            private_calls: candidates.private_call_candidates.iter().map(|c| (c.caller, c.continuation)).collect(),
            private_returns: candidates.private_returns.clone(),
            important_edges: BTreeSet::new(),
        }
    }

    fn is_private_caller(&self, block: BlockId) -> bool {
        self.private_calls.range((block, BlockId(0))..=(block, BlockId(u32::MAX))).next().is_some()
    }
}

/// Drops `c` and everything pushed after it: returns the suffix of `p`
/// strictly after the most recent occurrence of `c`.
pub fn cut_to(p: &[BlockId], c: BlockId) -> Vec<BlockId> {
    let pos = p.iter().position(|b| *b == c).expect("cut_to: block not in context");
    p[pos + 1..].to_vec()
}

fn push_bounded(cur: BlockId, p: &[BlockId], depth: usize) -> Vec<BlockId> {
    let keep = p.len().min(depth - 1);
    let mut out = Vec::with_capacity(keep + 1);
    out.push(cur);
    out.extend_from_slice(&p[..keep]);
    out
}

/// Context for `next` when the analysis follows `cur -> next` under `ctx`.
pub fn merge(ctx: &Context, cur: BlockId, next: BlockId, facts: &ConfirmedFacts, cfg: &SchemeConfig) -> Context {
    match cfg.scheme {
        Scheme::Transactional => merge_transactional(ctx, cur, next, facts, cfg),
        Scheme::Shrinking | Scheme::ShrinkingImportantEdges => merge_shrinking(ctx, cur, next, facts, cfg),
    }
}

fn merge_shrinking(ctx: &Context, cur: BlockId, next: BlockId, facts: &ConfirmedFacts, cfg: &SchemeConfig) -> Context {
    if facts.public_calls.contains(&(cur, next)) {
        return Context::new(Some(next), ctx.private_part.clone());
    }
    let is_return = facts.private_returns.contains(&cur);
    let matched = if is_return {
        ctx.private_part.iter().copied().find(|c| facts.private_calls.contains(&(*c, next)))
    } else {
        None
    };
    let important = cfg.scheme == Scheme::ShrinkingImportantEdges && facts.important_edges.contains(&(cur, next));
    if facts.is_private_caller(cur) || (is_return && matched.is_none()) || important {
        return Context::new(ctx.public_part, push_bounded(cur, &ctx.private_part, cfg.depth));
    }
    if let Some(c) = matched {
        return Context::new(ctx.public_part, cut_to(&ctx.private_part, c));
    }
    ctx.clone()
}

/// Baseline: sticky public entry plus the most recent likely calls/returns.
pub fn merge_transactional(
    ctx: &Context,
    cur: BlockId,
    next: BlockId,
    facts: &ConfirmedFacts,
    cfg: &SchemeConfig,
) -> Context {
    if facts.public_calls.contains(&(cur, next)) {
        return Context::new(Some(next), ctx.private_part.clone());
    }
    if facts.is_private_caller(cur) || facts.private_returns.contains(&cur) {
        return Context::new(ctx.public_part, push_bounded(cur, &ctx.private_part, cfg.depth));
    }
    ctx.clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x: u32) -> BlockId {
        BlockId(x)
    }

    fn shrinking(depth: usize) -> SchemeConfig {
        SchemeConfig::new(Scheme::Shrinking, depth)
    }

    #[test]
    fn cut_to_examples() {
        let c = b(0xc);
        assert_eq!(cut_to(&[b(3), b(2), c, b(1)], c), vec![b(1)]);
        assert_eq!(cut_to(&[c], c), Vec::<BlockId>::new());
        assert_eq!(cut_to(&[c, b(1), c, b(0)], c), vec![b(1), c, b(0)]);
    }

    #[test]
    #[should_panic]
    fn cut_to_requires_membership() {
        cut_to(&[b(1)], b(2));
    }

    #[test]
    fn public_call_sets_public_part() {
        let facts = ConfirmedFacts { public_calls: BTreeSet::from([(b(0x1a), b(0x38))]), ..Default::default() };
        let next = merge(&Context::initial(), b(0x1a), b(0x38), &facts, &shrinking(20));
        assert_eq!(next, Context::new(Some(b(0x38)), vec![]));
        let trans = SchemeConfig::new(Scheme::Transactional, 8);
        assert_eq!(merge(&Context::initial(), b(0x1a), b(0x38), &facts, &trans), next);
    }

    #[test]
    fn call_pushes_and_matched_return_restores() {
        let facts = ConfirmedFacts {
            private_calls: BTreeSet::from([(b(0x1ca), b(0x1d3))]),
            private_returns: BTreeSet::from([b(0x300)]),
            ..Default::default()
        };
        let u = Some(b(0x38));
        let cfg = shrinking(4);
        let called = merge(&Context::new(u, vec![b(0xa)]), b(0x1ca), b(0x200), &facts, &cfg);
        assert_eq!(called, Context::new(u, vec![b(0x1ca), b(0xa)]));

        let inside = Context::new(u, vec![b(0x999), b(0x1ca), b(0xa)]);
        let back = merge(&inside, b(0x300), b(0x1d3), &facts, &cfg);
        assert_eq!(back, Context::new(u, vec![b(0xa)]));

        // unmatched return pushes
        let lost = merge(&Context::new(u, vec![b(0xa)]), b(0x300), b(0x1d3), &facts, &cfg);
        assert_eq!(lost, Context::new(u, vec![b(0x300), b(0xa)]));
    }

    #[test]
    fn no_predicate_keeps_context() {
        let ctx = Context::new(Some(b(1)), vec![b(2), b(3)]);
        let next = merge(&ctx, b(0x10), b(0x20), &ConfirmedFacts::default(), &shrinking(20));
        assert_eq!(next, ctx);
    }

    #[test]
    fn most_recent_match_wins() {
        let facts = ConfirmedFacts {
            private_calls: BTreeSet::from([(b(1), b(0x50)), (b(2), b(0x50))]),
            private_returns: BTreeSet::from([b(9)]),
            ..Default::default()
        };
        let ctx = Context::new(None, vec![b(7), b(2), b(1), b(0)]);
        let next = merge(&ctx, b(9), b(0x50), &facts, &shrinking(20));
        assert_eq!(next.private_part, vec![b(1), b(0)]);
    }

    #[test]
    fn call_takes_precedence_over_return() {
        let facts = ConfirmedFacts {
            private_calls: BTreeSet::from([(b(5), b(0x50)), (b(1), b(0x60))]),
            private_returns: BTreeSet::from([b(5)]),
            ..Default::default()
        };
        let ctx = Context::new(None, vec![b(1)]);
        let next = merge(&ctx, b(5), b(0x60), &facts, &shrinking(20));
        assert_eq!(next.private_part, vec![b(5), b(1)]);
    }

    #[test]
    fn important_edges_only_under_their_scheme() {
        let facts = ConfirmedFacts { important_edges: BTreeSet::from([(b(1), b(2))]), ..Default::default() };
        let ctx = Context::new(None, vec![b(9)]);
        let plain = merge(&ctx, b(1), b(2), &facts, &shrinking(20));
        assert_eq!(plain, ctx);
        let cfg = SchemeConfig::new(Scheme::ShrinkingImportantEdges, 20);
        assert_eq!(merge(&ctx, b(1), b(2), &facts, &cfg).private_part, vec![b(1), b(9)]);
    }

    #[test]
    fn transactional_drops_oldest_and_never_shrinks() {
        let facts = ConfirmedFacts {
            private_calls: BTreeSet::from([(b(0x1ca), b(0x1d3))]),
            private_returns: BTreeSet::from([b(0x300)]),
            ..Default::default()
        };
        let cfg = SchemeConfig::new(Scheme::Transactional, 4);
        let ctx = Context::new(None, vec![b(0x1ca)]);
        let next = merge_transactional(&ctx, b(0x300), b(0x1d3), &facts, &cfg);
        assert_eq!(next.private_part, vec![b(0x300), b(0x1ca)]);

        let full = Context::new(None, vec![b(4), b(3), b(2), b(1)]);
        let next = merge_transactional(&full, b(0x1ca), b(0x100), &facts, &cfg);
        assert_eq!(next.private_part, vec![b(0x1ca), b(4), b(3), b(2)]);
    }

    fn arb_facts() -> impl Strategy<Value = ConfirmedFacts> {
        let blk = || (0u32..12).prop_map(BlockId);
        (
            proptest::collection::btree_set((blk(), blk()), 0..6),
            proptest::collection::btree_set((blk(), blk()), 0..10),
            proptest::collection::btree_set(blk(), 0..6),
            proptest::collection::btree_set((blk(), blk()), 0..6),
        )
            .prop_map(|(public_calls, private_calls, private_returns, important_edges)| ConfirmedFacts {
                public_calls,
                private_calls,
                private_returns,
                important_edges,
            })
    }

    proptest! {
        #[test]
        fn depth_is_bounded(
            facts in arb_facts(),
            walk in proptest::collection::vec(0u32..12, 1..60),
            depth in 1usize..6,
            scheme in prop_oneof![
                Just(Scheme::Shrinking),
                Just(Scheme::ShrinkingImportantEdges),
                Just(Scheme::Transactional)
            ],
        ) {
            let cfg = SchemeConfig::new(scheme, depth);
            let mut ctx = Context::initial();
            for pair in walk.windows(2) {
                ctx = merge(&ctx, BlockId(pair[0]), BlockId(pair[1]), &facts, &cfg);
                prop_assert!(ctx.private_part.len() <= depth);
            }
        }

        #[test]
        fn matched_return_yields_suffix(
            p in proptest::collection::vec(0u32..12, 1..8),
            pick in any::<prop::sample::Index>(),
        ) {
            let p: Vec<BlockId> = p.into_iter().map(BlockId).collect();
            let c = p[pick.index(p.len())];
            let next = BlockId(100);
            let ret = BlockId(200);
            let facts = ConfirmedFacts {
                private_calls: BTreeSet::from([(c, next)]),
                private_returns: BTreeSet::from([ret]),
                ..Default::default()
            };
            let out = merge(&Context::new(None, p.clone()), ret, next, &facts, &shrinking(20));
            prop_assert!(p.ends_with(&out.private_part));
            prop_assert!(out.private_part.len() < p.len());
        }
    }
}
