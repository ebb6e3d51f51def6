//! Binary `.cpo` codec.
//!
//! ```text
//! header   magic "CPOS" | version u16 | nsections u16 | nsymbols u16 | nrelocs u16 | name[64]
//! section  kind u8 | 0 0 0 | size u32 | payload_len u32                     (12 bytes each)
//! symbol   name[64] | class u8 | section u8 | is_function u8 | 0 | offset u32 | size u32   (76)
//! reloc    target[64] | kind u8 | section u8 | 0 0 | offset u32              (72)
//! payloads concatenated in section-table order
//! ```
//!
//! Little-endian throughout; names are ASCII, NUL padded. Decoding accepts
//! only canonical encodings, so `encode(decode(b)) == b` for every accepted blob.

use thiserror::Error;

use super::{ModuleImage, RelocKind, Relocation, Section, SectionKind, Symbol, SymbolClass, MAX_NAME_LEN};

pub const MAGIC: &[u8; 4] = b"CPOS";
pub const FORMAT_VERSION: u16 = 1;

const NAME_FIELD: usize = 64;
const HEADER_LEN: usize = 12 + NAME_FIELD;
const SECTION_LEN: usize = 12;
const SYMBOL_LEN: usize = NAME_FIELD + 12;
const RELOC_LEN: usize = NAME_FIELD + 8;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("bad magic (not a module file)")]
    BadMagic,
    #[error("truncated input: needed {needed} bytes at offset {at}")]
    TruncatedInput { at: usize, needed: usize },
    #[error("unknown format version {0}")]
    UnknownVersion(u16),
    #[error("malformed module: {0}")]
    Malformed(String),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EncodeError {
    #[error("name {0:?} is not 1..=63 ASCII bytes")]
    BadName(String),
    #[error("too many {0} entries")]
    TooMany(&'static str),
    #[error("section {0} payload length does not match its size")]
    PayloadMismatch(&'static str),
}

fn put_name(out: &mut Vec<u8>, name: &str, allow_empty: bool) -> Result<(), EncodeError> {
    if name.len() > MAX_NAME_LEN || !name.is_ascii() || name.contains('\0') || (name.is_empty() && !allow_empty) {
        return Err(EncodeError::BadName(name.to_string()));
    }
    let mut field = [0u8; NAME_FIELD];
    field[..name.len()].copy_from_slice(name.as_bytes());
    out.extend_from_slice(&field);
    Ok(())
}

fn count(n: usize, what: &'static str) -> Result<u16, EncodeError> {
    u16::try_from(n).map_err(|_| EncodeError::TooMany(what))
}

pub fn encode(image: &ModuleImage) -> Result<Vec<u8>, EncodeError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&image.format_version.to_le_bytes());
    out.extend_from_slice(&count(image.sections.len(), "section")?.to_le_bytes());
    out.extend_from_slice(&count(image.symbols.len(), "symbol")?.to_le_bytes());
    out.extend_from_slice(&count(image.relocations.len(), "relocation")?.to_le_bytes());
    put_name(&mut out, &image.name, true)?;
    for s in &image.sections {
        let expected = if s.kind == SectionKind::ZeroFill { 0 } else { s.size as usize };
        if s.payload.len() != expected {
            return Err(EncodeError::PayloadMismatch(s.name()));
        }
        out.extend_from_slice(&[s.kind.code(), 0, 0, 0]);
        out.extend_from_slice(&s.size.to_le_bytes());
        out.extend_from_slice(&(s.payload.len() as u32).to_le_bytes());
    }
    for sym in &image.symbols {
        put_name(&mut out, &sym.name, false)?;
        out.extend_from_slice(&[sym.class as u8, sym.section.code(), sym.is_function as u8, 0]);
        out.extend_from_slice(&sym.offset.to_le_bytes());
        out.extend_from_slice(&sym.size.to_le_bytes());
    }
    for r in &image.relocations {
        put_name(&mut out, &r.target, false)?;
        let kind = match r.kind {
            RelocKind::GprelSlot => 0u8,
            RelocKind::AbsInSection => 1u8,
        };
        out.extend_from_slice(&[kind, r.section.code(), 0, 0]);
        out.extend_from_slice(&r.offset.to_le_bytes());
    }
    for s in &image.sections {
        out.extend_from_slice(&s.payload);
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.buf.len() - self.pos < n {
            return Err(DecodeError::TruncatedInput { at: self.pos, needed: n });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, DecodeError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn zeros(&mut self, n: usize, what: &str) -> Result<(), DecodeError> {
        if self.take(n)?.iter().any(|b| *b != 0) {
            return Err(DecodeError::Malformed(format!("non-zero reserved bytes in {what}")));
        }
        Ok(())
    }

    fn name(&mut self, allow_empty: bool) -> Result<String, DecodeError> {
        let field = self.take(NAME_FIELD)?;
        let len = field.iter().position(|b| *b == 0).unwrap_or(NAME_FIELD);
        if len > MAX_NAME_LEN || field[len..].iter().any(|b| *b != 0) {
            return Err(DecodeError::Malformed("name field is not NUL padded".into()));
        }
        let name = &field[..len];
        if !name.is_ascii() || (name.is_empty() && !allow_empty) {
            return Err(DecodeError::Malformed("name is not non-empty ASCII".into()));
        }
        Ok(String::from_utf8(name.to_vec()).unwrap())
    }

    fn section_kind(&mut self) -> Result<SectionKind, DecodeError> {
        let c = self.u8()?;
        SectionKind::from_code(c).ok_or_else(|| DecodeError::Malformed(format!("unknown section kind {c}")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ModuleImage, DecodeError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if bytes.len() < MAGIC.len() {
        // Too short to even hold a magic: report what is there.
        if !MAGIC.starts_with(bytes) {
            return Err(DecodeError::BadMagic);
        }
        return Err(DecodeError::TruncatedInput { at: 0, needed: HEADER_LEN });
    }
    if r.take(4)? != MAGIC {
        return Err(DecodeError::BadMagic);
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(DecodeError::UnknownVersion(version));
    }
    let nsec = r.u16()? as usize;
    let nsym = r.u16()? as usize;
    let nrel = r.u16()? as usize;
    let name = r.name(true)?;
    let tables = nsec * SECTION_LEN + nsym * SYMBOL_LEN + nrel * RELOC_LEN;
    if bytes.len() - r.pos < tables {
        return Err(DecodeError::TruncatedInput { at: r.pos, needed: tables });
    }

    let mut table = Vec::with_capacity(nsec);
    for _ in 0..nsec {
        let kind = r.section_kind()?;
        r.zeros(3, "section entry")?;
        let size = r.u32()?;
        let payload_len = r.u32()?;
        let expected = if kind == SectionKind::ZeroFill { 0 } else { size };
        if payload_len != expected {
            return Err(DecodeError::Malformed(format!(
                "{} payload length {payload_len} does not match size {size}",
                kind.name()
            )));
        }
        table.push((kind, size, payload_len));
    }
    let mut symbols = Vec::with_capacity(nsym);
    for _ in 0..nsym {
        let name = r.name(false)?;
        let class_code = r.u8()?;
        let class = SymbolClass::from_code(class_code)
            .ok_or_else(|| DecodeError::Malformed(format!("unknown symbol class {class_code}")))?;
        let section = r.section_kind()?;
        let is_function = match r.u8()? {
            0 => false,
            1 => true,
            b => return Err(DecodeError::Malformed(format!("bad function flag {b}"))),
        };
        r.zeros(1, "symbol entry")?;
        let offset = r.u32()?;
        let size = r.u32()?;
        symbols.push(Symbol { name, class, section, offset, size, is_function });
    }
    let mut relocations = Vec::with_capacity(nrel);
    for _ in 0..nrel {
        let target = r.name(false)?;
        let kind = match r.u8()? {
            0 => RelocKind::GprelSlot,
            1 => RelocKind::AbsInSection,
            k => return Err(DecodeError::Malformed(format!("unknown relocation kind {k}"))),
        };
        let section = r.section_kind()?;
        r.zeros(2, "relocation entry")?;
        let offset = r.u32()?;
        relocations.push(Relocation { kind, section, offset, target });
    }
    let mut sections = Vec::with_capacity(nsec);
    for (kind, size, payload_len) in table {
        let payload = r.take(payload_len as usize)?.to_vec();
        sections.push(Section { kind, payload, size });
    }
    if r.pos != bytes.len() {
        return Err(DecodeError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(ModuleImage { name, format_version: version, sections, symbols, relocations })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_module_is_header_only() {
        let img = ModuleImage::new("empty");
        let blob = encode(&img).unwrap();
        assert_eq!(blob.len(), HEADER_LEN);
        assert_eq!(decode(&blob).unwrap(), img);
    }

    #[test]
    fn corrupted_magic() {
        let mut blob = encode(&ModuleImage::new("m")).unwrap();
        blob[0] = b'X';
        assert_eq!(decode(&blob), Err(DecodeError::BadMagic));
        assert_eq!(decode(b"ELF"), Err(DecodeError::BadMagic));
    }

    #[test]
    fn unknown_version() {
        let mut blob = encode(&ModuleImage::new("m")).unwrap();
        blob[4] = 9;
        assert_eq!(decode(&blob), Err(DecodeError::UnknownVersion(9)));
    }

    #[test]
    fn truncation_anywhere_is_reported() {
        let mut img = ModuleImage::new("m");
        img.sections.push(Section { kind: SectionKind::Data, payload: vec![1, 2, 3, 4], size: 4 });
        let blob = encode(&img).unwrap();
        for cut in 4..blob.len() {
            assert!(matches!(decode(&blob[..cut]), Err(DecodeError::TruncatedInput { .. })), "cut at {cut}");
        }
        assert!(matches!(decode(b"CP"), Err(DecodeError::TruncatedInput { .. })));
    }

    #[test]
    fn trailing_garbage_rejected() {
        let mut blob = encode(&ModuleImage::new("m")).unwrap();
        blob.push(0);
        assert!(matches!(decode(&blob), Err(DecodeError::Malformed(_))));
    }

    #[test]
    fn table_sizes() {
        let mut img = ModuleImage::new("m");
        img.sections.push(Section { kind: SectionKind::ZeroFill, payload: vec![], size: 64 });
        img.symbols.push(Symbol {
            name: "b".into(),
            class: SymbolClass::Local,
            section: SectionKind::ZeroFill,
            offset: 0,
            size: 64,
            is_function: false,
        });
        img.relocations.push(Relocation {
            kind: RelocKind::GprelSlot,
            section: SectionKind::Code,
            offset: 4,
            target: "t".into(),
        });
        let blob = encode(&img).unwrap();
        assert_eq!(blob.len(), HEADER_LEN + SECTION_LEN + SYMBOL_LEN + RELOC_LEN);
        assert_eq!(decode(&blob).unwrap(), img);
    }

    #[test]
    fn long_names_refused() {
        let img = ModuleImage::new("x".repeat(64));
        assert!(matches!(encode(&img), Err(EncodeError::BadName(_))));
    }
}
