use std::fmt;

use serde::{Deserialize, Serialize};

use super::Privilege;

/// Number of heap cells past the initial context pointer that NaCl-style
/// transitions may use for context records.
pub const CONTEXT_SPAN: u64 = 64;

/// Half-open address interval `[lo, hi)`.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Span {
    pub lo: u64,
    pub hi: u64,
}

impl Span {
    pub const fn new(lo: u64, hi: u64) -> Span {
        Span { lo, hi }
    }

    pub fn contains(&self, n: u64) -> bool {
        self.lo <= n && n < self.hi
    }

    pub fn is_empty(&self) -> bool {
        self.hi <= self.lo
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        !self.is_empty() && !other.is_empty() && self.lo < other.hi && other.lo < self.hi
    }

    pub fn addrs(&self) -> std::ops::Range<u64> {
        self.lo..self.hi
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..{}", self.lo, self.hi)
    }
}

/// NaCl transition context configuration: the cell `ctx_star` holds the
/// current context pointer, initially `ctx`.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CtxConfig {
    pub ctx_star: u64,
    pub ctx: u64,
}

/// Region classification of a single address.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    HeapTrusted,
    StackTrusted,
    HeapUntrusted,
    StackUntrusted,
    /// A shared stack cell, member of both stacks.
    SharedStack,
}

impl Region {
    pub fn is_stack(self) -> bool {
        matches!(
            self,
            Region::StackTrusted | Region::StackUntrusted | Region::SharedStack
        )
    }

    pub fn in_stack_of(self, p: Privilege) -> bool {
        match self {
            Region::SharedStack => true,
            Region::StackTrusted => p == Privilege::Trusted,
            Region::StackUntrusted => p == Privilege::Untrusted,
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Layout {
    pub h_t: Span,
    pub s_t: Span,
    pub h_u: Span,
    pub s_u: Span,
    pub shared_stack: bool,
    pub ctx: Option<CtxConfig>,
    pub sp0: u64,
    /// Which named preset this layout came from, if any; only affects printing.
    pub preset: Option<LayoutPreset>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayoutPreset {
    NaclDefault,
    ZerocostDefault,
}

impl Layout {
    pub fn nacl_default() -> Layout {
        Layout {
            h_t: Span::new(0, 128),
            s_t: Span::new(128, 256),
            h_u: Span::new(256, 384),
            s_u: Span::new(384, 512),
            shared_stack: false,
            ctx: Some(CtxConfig { ctx_star: 0, ctx: 8 }),
            sp0: 127,
            preset: Some(LayoutPreset::NaclDefault),
        }
    }

    pub fn zerocost_default() -> Layout {
        Layout {
            h_t: Span::new(0, 256),
            s_t: Span::new(512, 1024),
            h_u: Span::new(256, 512),
            s_u: Span::new(512, 1024),
            shared_stack: true,
            ctx: None,
            sp0: 511,
            preset: Some(LayoutPreset::ZerocostDefault),
        }
    }

    /// Checks the region invariants, returning a description of the first
    /// failure.
    pub fn validate(&self) -> Result<(), String> {
        let named = [
            ("h_t", self.h_t),
            ("s_t", self.s_t),
            ("h_u", self.h_u),
            ("s_u", self.s_u),
        ];
        if self.shared_stack && self.s_t != self.s_u {
            return Err("shared stack requires s_t = s_u".into());
        }
        for (i, (na, a)) in named.iter().enumerate() {
            if a.hi < a.lo {
                return Err(format!("{na} has hi < lo"));
            }
            for (nb, b) in &named[i + 1..] {
                let both_stacks = *na == "s_t" && *nb == "s_u";
                if both_stacks && self.shared_stack {
                    continue;
                }
                if a.overlaps(b) {
                    return Err(format!("{na} overlaps {nb}"));
                }
            }
        }
        Ok(())
    }

    pub fn heap(&self, p: Privilege) -> Span {
        match p {
            Privilege::Trusted => self.h_t,
            Privilege::Untrusted => self.h_u,
        }
    }

    pub fn stack(&self, p: Privilege) -> Span {
        match p {
            Privilege::Trusted => self.s_t,
            Privilege::Untrusted => self.s_u,
        }
    }

    pub fn in_heap(&self, p: Privilege, n: u64) -> bool {
        self.heap(p).contains(n)
    }

    pub fn in_stack(&self, p: Privilege, n: u64) -> bool {
        self.stack(p).contains(n)
    }

    pub fn in_mem(&self, p: Privilege, n: u64) -> bool {
        self.in_heap(p, n) || self.in_stack(p, n)
    }

    pub fn in_any_stack(&self, n: u64) -> bool {
        self.s_t.contains(n) || self.s_u.contains(n)
    }

    /// Every privilege `p_s` whose stack contains `n`.
    pub fn stack_owners(&self, n: u64) -> impl Iterator<Item = Privilege> + '_ {
        [Privilege::Untrusted, Privilege::Trusted]
            .into_iter()
            .filter(move |p| self.in_stack(*p, n))
    }

    pub fn region_of(&self, n: u64) -> Option<Region> {
        if self.h_t.contains(n) {
            Some(Region::HeapTrusted)
        } else if self.h_u.contains(n) {
            Some(Region::HeapUntrusted)
        } else if self.shared_stack && self.s_t.contains(n) {
            Some(Region::SharedStack)
        } else if self.s_t.contains(n) {
            Some(Region::StackTrusted)
        } else if self.s_u.contains(n) {
            Some(Region::StackUntrusted)
        } else {
            None
        }
    }

    /// One past the highest address of any region.
    pub fn max_addr(&self) -> u64 {
        [self.h_t, self.s_t, self.h_u, self.s_u]
            .iter()
            .map(|s| s.hi)
            .max()
            .unwrap_or(0)
    }

    /// Memory cells implied by the layout: the NaCl context pointer and the
    /// initial library stack pointer stored at the context.
    pub fn implied_memory(&self) -> Vec<(u64, u64)> {
        match self.ctx {
            Some(c) => vec![(c.ctx_star, c.ctx), (c.ctx, self.s_u.lo.saturating_sub(1))],
            None => Vec::new(),
        }
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.preset {
            Some(LayoutPreset::NaclDefault) if *self == Layout::nacl_default() => return f.write_str("nacl-default"),
            Some(LayoutPreset::ZerocostDefault) if *self == Layout::zerocost_default() => {
                return f.write_str("zerocost-default")
            }
            _ => {}
        }
        write!(
            f,
            "custom h_t={} s_t={} h_u={} s_u={}",
            self.h_t, self.s_t, self.h_u, self.s_u
        )?;
        if self.shared_stack {
            f.write_str(" shared")?;
        }
        if let Some(c) = self.ctx {
            write!(f, " ctxstar={} ctx={}", c.ctx_star, c.ctx)?;
        }
        write!(f, " sp0={}", self.sp0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nacl_default_classification() {
        let l = Layout::nacl_default();
        assert_eq!(l.region_of(130), Some(Region::StackTrusted));
        assert_eq!(l.region_of(5), Some(Region::HeapTrusted));
        assert_eq!(l.region_of(300), Some(Region::HeapUntrusted));
        assert_eq!(l.region_of(400), Some(Region::StackUntrusted));
        assert_eq!(l.region_of(512), None);
        assert!(l.validate().is_ok());
    }

    #[test]
    fn zerocost_default_shared_stack() {
        let l = Layout::zerocost_default();
        assert_eq!(l.region_of(600), Some(Region::SharedStack));
        assert!(l.in_stack(Privilege::Trusted, 600));
        assert!(l.in_stack(Privilege::Untrusted, 600));
        assert_eq!(l.region_of(5000), None);
        assert!(l.validate().is_ok());
    }

    #[test]
    fn nacl_implied_context() {
        let l = Layout::nacl_default();
        assert_eq!(l.implied_memory(), vec![(0, 8), (8, 383)]);
    }

    #[test]
    fn overlap_rejected() {
        let mut l = Layout::nacl_default();
        l.h_u = Span::new(100, 200);
        assert!(l.validate().is_err());
    }
}
