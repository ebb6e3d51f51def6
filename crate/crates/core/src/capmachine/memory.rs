//! Flat byte memory with one validity tag per 16-byte granule.
//!
//! Checked accessors apply the fixed check order Tag, Seal, Perm, Bounds.
//! With enforcement disabled only the physical extent of memory is checked.

use super::capability::{Capability, Perms, CAP_SIZE};
use super::fault::{FaultKind, Violation};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaggedMemory {
    bytes: Vec<u8>,
    tags: Vec<bool>,
}

/// Whether capability checks are applied to an access.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Enforcement {
    Enforced,
    Disabled,
}

impl TaggedMemory {
    pub fn new(size: u32) -> Self {
        let granules = size.div_ceil(CAP_SIZE) as usize;
        TaggedMemory { bytes: vec![0; size as usize], tags: vec![false; granules] }
    }

    pub fn size(&self) -> u32 {
        self.bytes.len() as u32
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    fn in_physical(&self, addr: u64, len: u64) -> bool {
        addr + len <= self.bytes.len() as u64
    }

    fn clear_tags(&mut self, addr: u32, len: u32) {
        if len == 0 {
            return;
        }
        let first = (addr / CAP_SIZE) as usize;
        let last = ((addr + len - 1) / CAP_SIZE) as usize;
        for t in &mut self.tags[first..=last] {
            *t = false;
        }
    }

    pub fn tag_at(&self, addr: u32) -> bool {
        self.tags[(addr / CAP_SIZE) as usize]
    }

    /// Clear the tag of the granule containing `addr`.
    pub fn invalidate_granule(&mut self, addr: u32) {
        self.tags[(addr / CAP_SIZE) as usize] = false;
    }

    /// Addresses of every granule whose tag is set.
    pub fn tagged_granules(&self) -> impl Iterator<Item = u32> + '_ {
        self.tags.iter().enumerate().filter(|(_, t)| **t).map(|(i, _)| i as u32 * CAP_SIZE)
    }

    // Host-side (loader) access. No capability checks: only the holder of the
    // root capability may call these.

    pub fn read_bytes(&self, addr: u32, len: u32) -> &[u8] {
        &self.bytes[addr as usize..(addr + len) as usize]
    }

    pub fn write_bytes(&mut self, addr: u32, data: &[u8]) {
        let a = addr as usize;
        self.bytes[a..a + data.len()].copy_from_slice(data);
        self.clear_tags(addr, data.len() as u32);
    }

    pub fn fill(&mut self, addr: u32, len: u32, value: u8) {
        let a = addr as usize;
        self.bytes[a..a + len as usize].fill(value);
        self.clear_tags(addr, len);
    }

    pub fn read_word_raw(&self, addr: u32) -> u32 {
        u32::from_le_bytes(self.read_bytes(addr, 4).try_into().unwrap())
    }

    pub fn write_word_raw(&mut self, addr: u32, value: u32) {
        self.write_bytes(addr, &value.to_le_bytes());
    }

    /// Read a capability image at a granule-aligned address with its tag.
    pub fn read_cap_raw(&self, addr: u32) -> Capability {
        debug_assert_eq!(addr % CAP_SIZE, 0);
        let raw: [u8; CAP_SIZE as usize] = self.read_bytes(addr, CAP_SIZE).try_into().unwrap();
        Capability::from_bytes(&raw, self.tag_at(addr))
    }

    pub fn write_cap_raw(&mut self, addr: u32, cap: Capability) {
        debug_assert_eq!(addr % CAP_SIZE, 0);
        let a = addr as usize;
        self.bytes[a..a + CAP_SIZE as usize].copy_from_slice(&cap.to_bytes());
        self.tags[(addr / CAP_SIZE) as usize] = cap.tag;
    }

    /// Resolve and check an access of `len` bytes at `cap.cursor + offset`.
    pub fn check_access(
        &self,
        cap: &Capability,
        offset: i64,
        len: u32,
        need: Perms,
        enforcement: Enforcement,
    ) -> Result<u32, Violation> {
        let addr = cap.cursor as i64 + offset;
        if enforcement == Enforcement::Enforced {
            if !cap.tag {
                return Err(Violation::new(FaultKind::TagViolation, "access through untagged capability"));
            }
            if cap.is_sentry() {
                return Err(Violation::new(FaultKind::SealViolation, "dereference of a sealed entry"));
            }
            if !cap.perms.contains(need) {
                return Err(Violation::new(
                    FaultKind::PermViolation,
                    format!("needs {} has {}", need.short(), cap.perms.short()),
                ));
            }
            if addr < 0 || !cap.covers(addr as u64, len as u64) {
                return Err(Violation::new(
                    FaultKind::BoundsViolation,
                    format!("access {addr:#x}+{len} outside {cap:?}"),
                ));
            }
        }
        if addr < 0 || !self.in_physical(addr as u64, len as u64) {
            return Err(Violation::new(
                FaultKind::BoundsViolation,
                format!("access {addr:#x}+{len} outside physical memory"),
            ));
        }
        Ok(addr as u32)
    }

    fn check_cap_alignment(addr: u32) -> Result<(), Violation> {
        if !addr.is_multiple_of(CAP_SIZE) {
            return Err(Violation::new(
                FaultKind::BoundsViolation,
                format!("unaligned capability access at {addr:#x}"),
            ));
        }
        Ok(())
    }

    pub fn load_word(&self, cap: &Capability, offset: i64, e: Enforcement) -> Result<u32, Violation> {
        let addr = self.check_access(cap, offset, 4, Perms::LOAD, e)?;
        Ok(self.read_word_raw(addr))
    }

    pub fn load_byte(&self, cap: &Capability, offset: i64, e: Enforcement) -> Result<u8, Violation> {
        let addr = self.check_access(cap, offset, 1, Perms::LOAD, e)?;
        Ok(self.bytes[addr as usize])
    }

    /// Store a word; clears the tag of any granule it touches.
    pub fn store_word(&mut self, cap: &Capability, offset: i64, value: u32, e: Enforcement) -> Result<(), Violation> {
        let addr = self.check_access(cap, offset, 4, Perms::STORE, e)?;
        self.write_word_raw(addr, value);
        Ok(())
    }

    pub fn store_byte(&mut self, cap: &Capability, offset: i64, value: u8, e: Enforcement) -> Result<(), Violation> {
        let addr = self.check_access(cap, offset, 1, Perms::STORE, e)?;
        self.write_bytes(addr, &[value]);
        Ok(())
    }

    /// Load a capability; the result is tagged only if the granule tag is set.
    pub fn load_cap(&self, cap: &Capability, offset: i64, e: Enforcement) -> Result<Capability, Violation> {
        let addr = self.check_access(cap, offset, CAP_SIZE, Perms::LOAD_CAP, e)?;
        Self::check_cap_alignment(addr)?;
        Ok(self.read_cap_raw(addr))
    }

    pub fn store_cap(
        &mut self,
        cap: &Capability,
        offset: i64,
        value: Capability,
        e: Enforcement,
    ) -> Result<(), Violation> {
        let addr = self.check_access(cap, offset, CAP_SIZE, Perms::STORE_CAP, e)?;
        Self::check_cap_alignment(addr)?;
        self.write_cap_raw(addr, value);
        Ok(())
    }
}
