//! Capability values and the monotonic derivation algebra.

use std::fmt;

use bitflags::bitflags;
use serde::Serialize;
use thiserror::Error;

/// Size in bytes of a capability in memory, and of one tag granule.
pub const CAP_SIZE: u32 = 16;

bitflags! {
    /// Permission bits carried by a capability.
    #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
    pub struct Perms: u8 {
        const LOAD = 1 << 0;
        const STORE = 1 << 1;
        const EXECUTE = 1 << 2;
        const LOAD_CAP = 1 << 3;
        const STORE_CAP = 1 << 4;
    }
}

impl Perms {
    pub const ALL: Perms = Perms::all();

    /// Read-only, executable: code regions.
    pub const CODE: Perms = Perms::LOAD.union(Perms::EXECUTE);
    /// Read-only constants.
    pub const RODATA: Perms = Perms::LOAD.union(Perms::LOAD_CAP);
    /// Read/write data, never executable.
    pub const DATA: Perms = Perms::LOAD.union(Perms::STORE).union(Perms::LOAD_CAP).union(Perms::STORE_CAP);

    /// Short mnemonic form, e.g. `LS-CK` style: one letter per bit, `-` when absent.
    pub fn short(self) -> String {
        let mut s = String::with_capacity(5);
        for (bit, ch) in [
            (Perms::LOAD, 'r'),
            (Perms::STORE, 'w'),
            (Perms::EXECUTE, 'x'),
            (Perms::LOAD_CAP, 'R'),
            (Perms::STORE_CAP, 'W'),
        ] {
            s.push(if self.contains(bit) { ch } else { '-' });
        }
        s
    }
}

impl Serialize for Perms {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.short())
    }
}

/// Seal state. Sentries can be jumped to but not dereferenced or modified.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Seal {
    Unsealed,
    Sentry,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum CapError {
    #[error("capability tag is clear")]
    TagViolation,
    #[error("capability is sealed")]
    SealViolation,
    #[error("capability lacks a required permission")]
    PermViolation,
    #[error("requested bounds are not contained in the source bounds")]
    MonotonicityViolation,
}

/// A tagged reference: `[base, base+length)` with a free-floating cursor.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct Capability {
    pub tag: bool,
    pub base: u32,
    pub length: u32,
    pub cursor: u32,
    pub perms: Perms,
    pub seal: Seal,
}

impl fmt::Debug for Capability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "cap{{{}[{:#x},{:#x}) @{:#x} {}{}}}",
            if self.tag { "" } else { "!untagged " },
            self.base,
            self.end(),
            self.cursor,
            self.perms.short(),
            if self.seal == Seal::Sentry { " sentry" } else { "" },
        )
    }
}

impl Default for Capability {
    fn default() -> Self {
        Capability::NULL
    }
}

impl Capability {
    /// The untagged null capability.
    pub const NULL: Capability =
        Capability { tag: false, base: 0, length: 0, cursor: 0, perms: Perms::empty(), seal: Seal::Unsealed };

    /// Root capability covering `[0, memory_size)` with every permission.
    ///
    /// Panics when `memory_size` is zero; machines reject that size before
    /// ever asking for a root.
    pub fn root(memory_size: u32) -> Capability {
        assert!(memory_size > 0, "memory size must be positive");
        Capability { tag: true, base: 0, length: memory_size, cursor: 0, perms: Perms::ALL, seal: Seal::Unsealed }
    }

    /// An untagged value carrying only an integer in its cursor.
    pub fn from_int(value: u32) -> Capability {
        Capability { cursor: value, ..Capability::NULL }
    }

    /// One past the last addressable byte (as u64 so the top of memory is representable).
    pub fn end(&self) -> u64 {
        self.base as u64 + self.length as u64
    }

    pub fn is_sentry(&self) -> bool {
        self.seal == Seal::Sentry
    }

    /// Whether `[addr, addr+len)` lies inside this capability's bounds.
    pub fn covers(&self, addr: u64, len: u64) -> bool {
        addr >= self.base as u64 && addr + len <= self.end()
    }

    /// Whether this capability's range is contained in `other`'s.
    pub fn range_within(&self, other: &Capability) -> bool {
        self.base >= other.base && self.end() <= other.end()
    }

    fn check_derivable(&self) -> Result<(), CapError> {
        if !self.tag {
            return Err(CapError::TagViolation);
        }
        if self.seal != Seal::Unsealed {
            return Err(CapError::SealViolation);
        }
        Ok(())
    }

    /// Narrow bounds to `[new_base, new_base+new_len)`. The cursor moves to `new_base`.
    pub fn set_bounds(&self, new_base: u32, new_len: u32) -> Result<Capability, CapError> {
        self.check_derivable()?;
        let new_end = new_base as u64 + new_len as u64;
        if (new_base as u64) < self.base as u64 || new_end > self.end() {
            return Err(CapError::MonotonicityViolation);
        }
        Ok(Capability { base: new_base, length: new_len, cursor: new_base, ..*self })
    }

    /// Intersect permissions with `mask`.
    pub fn and_perms(&self, mask: Perms) -> Result<Capability, CapError> {
        self.check_derivable()?;
        Ok(Capability { perms: self.perms & mask, ..*self })
    }

    /// Seal as a sealed-entry capability.
    pub fn seal_sentry(&self) -> Result<Capability, CapError> {
        self.check_derivable()?;
        if !self.perms.contains(Perms::EXECUTE) {
            return Err(CapError::PermViolation);
        }
        Ok(Capability { seal: Seal::Sentry, ..*self })
    }

    /// Move the cursor. Sealed capabilities cannot be modified; untagged ones
    /// may be, and stay untagged.
    pub fn with_cursor(&self, cursor: u32) -> Result<Capability, CapError> {
        if self.tag && self.seal != Seal::Unsealed {
            return Err(CapError::SealViolation);
        }
        Ok(Capability { cursor, ..*self })
    }

    pub fn offset_by(&self, delta: i64) -> Result<Capability, CapError> {
        self.with_cursor((self.cursor as i64).wrapping_add(delta) as u32)
    }

    /// Cleared-tag copy of this capability.
    pub fn untagged(&self) -> Capability {
        Capability { tag: false, ..*self }
    }

    pub fn unsealed(&self) -> Capability {
        Capability { seal: Seal::Unsealed, ..*self }
    }

    /// 16-byte little-endian memory image (the tag lives out of band).
    pub fn to_bytes(&self) -> [u8; CAP_SIZE as usize] {
        let mut out = [0u8; CAP_SIZE as usize];
        out[0..4].copy_from_slice(&self.base.to_le_bytes());
        out[4..8].copy_from_slice(&self.length.to_le_bytes());
        out[8..12].copy_from_slice(&self.cursor.to_le_bytes());
        out[12] = self.perms.bits();
        out[13] = match self.seal {
            Seal::Unsealed => 0,
            Seal::Sentry => 1,
        };
        out
    }

    /// Decode a memory image; `tag` comes from the granule's tag bit.
    pub fn from_bytes(bytes: &[u8; CAP_SIZE as usize], tag: bool) -> Capability {
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        Capability {
            tag,
            base: word(0),
            length: word(4),
            cursor: word(8),
            perms: Perms::from_bits_truncate(bytes[12]),
            seal: if bytes[13] & 1 == 1 { Seal::Sentry } else { Seal::Unsealed },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn root_has_everything() {
        let r = Capability::root(65536);
        assert!(r.tag);
        assert_eq!((r.base, r.length), (0, 65536));
        assert_eq!(r.perms, Perms::ALL);
        assert_eq!(r.seal, Seal::Unsealed);
        let tiny = Capability::root(1);
        assert_eq!((tiny.base, tiny.length), (0, 1));
    }

    #[test]
    #[should_panic]
    fn root_of_nothing_panics() {
        Capability::root(0);
    }

    #[test]
    fn set_bounds_subset_and_superset() {
        let src = Capability::root(1000);
        let c = src.set_bounds(100, 100).unwrap();
        assert_eq!((c.base, c.length, c.perms), (100, 100, Perms::ALL));
        assert_eq!(c.set_bounds(50, 250), Err(CapError::MonotonicityViolation));
        assert_eq!(c.untagged().set_bounds(100, 1), Err(CapError::TagViolation));
        let sentry = c.seal_sentry().unwrap();
        assert_eq!(sentry.set_bounds(100, 1), Err(CapError::SealViolation));
    }

    #[test]
    fn and_perms_intersects() {
        let c = Capability::root(64).and_perms(Perms::LOAD | Perms::STORE | Perms::EXECUTE).unwrap();
        assert_eq!(c.and_perms(Perms::LOAD).unwrap().perms, Perms::LOAD);
        let l = c.and_perms(Perms::LOAD).unwrap();
        let none = l.and_perms(Perms::STORE).unwrap();
        assert!(none.tag);
        assert_eq!(none.perms, Perms::empty());
    }

    #[test]
    fn sentry_requires_execute() {
        let exec = Capability::root(64).and_perms(Perms::CODE).unwrap();
        let s = exec.seal_sentry().unwrap();
        assert_eq!(s, Capability { seal: Seal::Sentry, ..exec });
        let data = Capability::root(64).and_perms(Perms::DATA).unwrap();
        assert_eq!(data.seal_sentry(), Err(CapError::PermViolation));
        assert_eq!(s.with_cursor(4), Err(CapError::SealViolation));
    }

    #[test]
    fn byte_image_round_trip() {
        let c =
            Capability::root(4096).set_bounds(16, 32).unwrap().and_perms(Perms::CODE).unwrap().seal_sentry().unwrap();
        assert_eq!(Capability::from_bytes(&c.to_bytes(), true), c);
        assert_eq!(Capability::from_bytes(&c.to_bytes(), false), c.untagged());
    }

    proptest! {
        #[test]
        fn and_perms_never_grows(src in any::<u8>(), mask in any::<u8>()) {
            let src = Capability::root(128)
                .and_perms(Perms::from_bits_truncate(src)).unwrap();
            let out = src.and_perms(Perms::from_bits_truncate(mask)).unwrap();
            prop_assert!(src.perms.contains(out.perms));
            prop_assert_eq!((out.base, out.length), (src.base, src.length));
        }
    }
}
