//! Direct evaluation of the span-for-span substitution legality table.

/// Class-level view of a span, detached from any corpus representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OracleSpan {
    pub first_class: u32,
    pub last_class: u32,
    pub len: usize,
    pub is_subtree: bool,
    pub root_class: Option<u32>,
}

/// `boundary_subtree_rule` switches the subtree acceptance clause from
/// root-token class matching to boundary-pair matching against the root
/// class.
pub fn oracle_legal(out: &OracleSpan, inp: &OracleSpan, boundary_subtree_rule: bool) -> bool {
    // A single-token swap-out only admits spans whose boundary pair is that
    // token's class twice over.
    if out.len == 1 {
        return inp.first_class == out.first_class && inp.last_class == out.first_class;
    }
    let boundary_match =
        inp.first_class == out.first_class && inp.last_class == out.last_class;
    if out.is_subtree {
        if let Some(r) = out.root_class {
            let subtree_route = if boundary_subtree_rule {
                inp.is_subtree && inp.first_class == r && inp.last_class == r
            } else {
                inp.is_subtree && inp.root_class == Some(r)
            };
            return boundary_match || subtree_route;
        }
    }
    boundary_match
}
