//! The `.teso` bitstream container.
//!
//! Little-endian layout: 4-byte magic `TESO`, u16 version, the stream header
//! (grid depth, leaf levels, patch sizes, split threshold, quantization
//! steps, codec ids), a section table of `(id, offset, length)` entries, then
//! the concatenated section payloads. The exact field order is frozen in
//! FORMAT.md and by golden fixtures.

use crate::error::{Error, Result};
use crate::octree::LevelsConfig;

pub const MAGIC: [u8; 4] = *b"TESO";
pub const VERSION: u16 = 1;

/// Section id kinds; the full id is `(kind << 8) | level`.
pub const KIND_BASE: u8 = 1;
pub const KIND_OCCUPANCY: u8 = 2;
pub const KIND_LEAF_FLAGS: u8 = 3;
pub const KIND_ATTRIBUTES: u8 = 4;
pub const KIND_TEXTURE: u8 = 5;

#[inline]
pub fn section_id(kind: u8, level: u32) -> u16 {
    ((kind as u16) << 8) | (level as u16 & 0xff)
}

#[inline]
pub fn section_kind(id: u16) -> u8 {
    (id >> 8) as u8
}

#[inline]
pub fn section_level(id: u16) -> u32 {
    (id & 0xff) as u32
}

/// Geometry codec ids carried in the header.
pub const GEOM_CODEC_INTERNAL: u8 = 0;
/// Texture codec ids carried in the header.
pub const TEX_CODEC_INTERNAL_DCT: u8 = 0;
pub const TEX_CODEC_EXTERNAL_RAW: u8 = 1;

/// Everything a decoder needs before touching section payloads.
#[derive(Debug, Clone, PartialEq)]
pub struct ContainerHeader {
    pub version: u16,
    pub depth: u32,
    pub leaf_levels: Vec<u32>,
    pub patch_sizes: Vec<u32>,
    pub tau_db: f64,
    pub offset_step: f64,
    pub normal_step: f64,
    pub radius_step: f64,
    pub geom_codec: u8,
    pub tex_codec: u8,
    /// Texture quantizer scale 1..63; 0 when no texture stream is present.
    pub qt: u8,
}

impl ContainerHeader {
    pub fn new(depth: u32, config: &LevelsConfig, tau_db: f64) -> Self {
        ContainerHeader {
            version: VERSION,
            depth,
            leaf_levels: config.leaf_levels.clone(),
            patch_sizes: config.patch_sizes.clone(),
            tau_db,
            offset_step: 0.5,
            normal_step: 1.0 / 64.0,
            radius_step: 1.0 / 16.0,
            geom_codec: GEOM_CODEC_INTERNAL,
            tex_codec: TEX_CODEC_INTERNAL_DCT,
            qt: 0,
        }
    }

    pub fn l_min(&self) -> u32 {
        self.leaf_levels[0]
    }

    pub fn l_max(&self) -> u32 {
        *self.leaf_levels.last().unwrap()
    }

    pub fn levels_config(&self) -> LevelsConfig {
        LevelsConfig {
            leaf_levels: self.leaf_levels.clone(),
            patch_sizes: self.patch_sizes.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.depth > crate::morton::MAX_LEVEL {
            return Err(Error::Format(format!("unsupported depth {}", self.depth)));
        }
        self.levels_config()
            .validate(self.depth)
            .map_err(|e| Error::Format(format!("bad level config: {e}")))?;
        if !self.tau_db.is_finite() {
            return Err(Error::Format("non-finite split threshold".into()));
        }
        for (name, v) in [
            ("offset", self.offset_step),
            ("normal", self.normal_step),
            ("radius", self.radius_step),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Format(format!("bad {name} quantization step {v}")));
            }
        }
        Ok(())
    }
}

/// One payload section. Ids must be unique within a container.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Section {
    pub id: u16,
    pub bytes: Vec<u8>,
}

/// Accounting for one emitted section: payload size, coded symbol count,
/// and the model cross-entropy estimate accumulated while coding.
#[derive(Debug, Clone)]
pub struct SectionStats {
    pub id: u16,
    pub bytes: usize,
    pub symbols: u64,
    pub estimate_bits: f64,
}

impl Section {
    pub fn new(id: u16, bytes: Vec<u8>) -> Self {
        Section { id, bytes }
    }
}

struct Writer {
    out: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.out.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.out.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.out.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn serialize(header: &ContainerHeader, sections: &[Section]) -> Result<Vec<u8>> {
    header.validate()?;
    {
        let mut ids: Vec<u16> = sections.iter().map(|s| s.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Precondition("duplicate section id".into()));
        }
    }

    let mut w = Writer { out: Vec::new() };
    w.out.extend_from_slice(&MAGIC);
    w.u16(header.version);
    w.u8(header.depth as u8);
    w.u8(header.l_min() as u8);
    w.u8(header.l_max() as u8);
    w.u8(header.leaf_levels.len() as u8);
    for &l in &header.leaf_levels {
        w.u8(l as u8);
    }
    for &m in &header.patch_sizes {
        w.u16(m as u16);
    }
    w.f64(header.tau_db);
    w.f64(header.offset_step);
    w.f64(header.normal_step);
    w.f64(header.radius_step);
    w.u8(header.geom_codec);
    w.u8(header.tex_codec);
    w.u8(header.qt);

    w.u16(sections.len() as u16);
    let mut offset = 0u64;
    for s in sections {
        w.u16(s.id);
        w.u64(offset);
        w.u64(s.bytes.len() as u64);
        offset += s.bytes.len() as u64;
    }
    for s in sections {
        w.out.extend_from_slice(&s.bytes);
    }
    Ok(w.out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let slice = self
            .bytes
            .get(self.pos..self.pos.saturating_add(n))
            .ok_or_else(|| {
                Error::Format(format!("truncated container: {what} at byte {}", self.pos))
            })?;
        self.pos += n;
        Ok(slice)
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn parse(bytes: &[u8]) -> Result<(ContainerHeader, Vec<Section>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic, not a TESO stream".into()));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported container version {version}"
        )));
    }
    let depth = r.u8("depth")? as u32;
    let l_min = r.u8("l_min")? as u32;
    let l_max = r.u8("l_max")? as u32;
    let n_levels = r.u8("leaf level count")? as usize;
    let mut leaf_levels = Vec::with_capacity(n_levels);
    for _ in 0..n_levels {
        leaf_levels.push(r.u8("leaf level")? as u32);
    }
    let mut patch_sizes = Vec::with_capacity(n_levels);
    for _ in 0..n_levels {
        patch_sizes.push(r.u16("patch size")? as u32);
    }
    let tau_db = r.f64("tau")?;
    let offset_step = r.f64("offset step")?;
    let normal_step = r.f64("normal step")?;
    let radius_step = r.f64("radius step")?;
    let geom_codec = r.u8("geometry codec id")?;
    let tex_codec = r.u8("texture codec id")?;
    let qt = r.u8("Qt")?;

    let header = ContainerHeader {
        version,
        depth,
        leaf_levels,
        patch_sizes,
        tau_db,
        offset_step,
        normal_step,
        radius_step,
        geom_codec,
        tex_codec,
        qt,
    };
    header.validate()?;
    if header.l_min() != l_min || header.l_max() != l_max {
        return Err(Error::Format(format!(
            "l_min/l_max fields ({l_min},{l_max}) disagree with leaf levels {:?}",
            header.leaf_levels
        )));
    }

    let n_sections = r.u16("section count")? as usize;
    let mut table = Vec::with_capacity(n_sections);
    for _ in 0..n_sections {
        let id = r.u16("section id")?;
        let offset = r.u64("section offset")?;
        let len = r.u64("section length")?;
        table.push((id, offset, len));
    }
    {
        let mut ids: Vec<u16> = table.iter().map(|t| t.0).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Format("duplicate section id".into()));
        }
    }

    let payload = &bytes[r.pos..];
    let total: u64 = table.iter().map(|t| t.2).sum();
    if total != payload.len() as u64 {
        return Err(Error::Format(format!(
            "section lengths sum to {total} but payload is {} bytes",
            payload.len()
        )));
    }
    let mut sections = Vec::with_capacity(n_sections);
    for (id, offset, len) in table {
        let end = offset.checked_add(len).filter(|&e| e <= payload.len() as u64);
        let Some(end) = end else {
            return Err(Error::Format(format!(
                "section {id:#06x} overruns payload ({offset}+{len})"
            )));
        };
        sections.push(Section {
            id,
            bytes: payload[offset as usize..end as usize].to_vec(),
        });
    }
    Ok((header, sections))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header() -> ContainerHeader {
        let cfg = LevelsConfig::with_default_patch_sizes(10, vec![6, 7, 8]);
        ContainerHeader::new(10, &cfg, 66.0)
    }

    #[test]
    fn zero_sections_roundtrip() {
        let h = header();
        let bytes = serialize(&h, &[]).unwrap();
        let (h2, s2) = parse(&bytes).unwrap();
        assert_eq!(h, h2);
        assert!(s2.is_empty());
    }

    #[test]
    fn two_sections_roundtrip() {
        let h = header();
        let sections = vec![
            Section::new(section_id(KIND_BASE, 0), vec![1; 10]),
            Section::new(section_id(KIND_OCCUPANCY, 7), vec![2; 20]),
        ];
        let bytes = serialize(&h, &sections).unwrap();
        let (h2, s2) = parse(&bytes).unwrap();
        assert_eq!(h, h2);
        assert_eq!(s2, sections);
        // payload is the last 30 bytes
        assert_eq!(&bytes[bytes.len() - 30..bytes.len() - 20], &[1u8; 10]);
    }

    #[test]
    fn unknown_section_ids_are_preserved() {
        let h = header();
        let sections = vec![Section::new(0x7f42, vec![9, 9, 9])];
        let bytes = serialize(&h, &sections).unwrap();
        let (_, s2) = parse(&bytes).unwrap();
        assert_eq!(s2, sections);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let h = header();
        let sections = vec![
            Section::new(7, vec![1]),
            Section::new(7, vec![2]),
        ];
        assert!(serialize(&h, &sections).is_err());
    }

    #[test]
    fn bad_magic_rejected() {
        let h = header();
        let mut bytes = serialize(&h, &[]).unwrap();
        bytes[0] = b'X';
        assert!(matches!(parse(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn lengths_exceeding_payload_rejected() {
        let h = header();
        let sections = vec![Section::new(1, vec![0; 16])];
        let bytes = serialize(&h, &sections).unwrap();
        // chop payload bytes off the end
        assert!(parse(&bytes[..bytes.len() - 4]).is_err());
    }

    #[test]
    fn truncation_at_every_byte_errors_without_panic() {
        let h = header();
        let sections = vec![
            Section::new(section_id(KIND_BASE, 0), (0..50).collect()),
            Section::new(section_id(KIND_ATTRIBUTES, 6), vec![3; 7]),
        ];
        let bytes = serialize(&h, &sections).unwrap();
        for cut in 0..bytes.len() {
            assert!(parse(&bytes[..cut]).is_err(), "prefix {cut} parsed");
        }
        assert!(parse(&bytes).is_ok());
    }

    #[test]
    fn section_id_packing() {
        let id = section_id(KIND_TEXTURE, 8);
        assert_eq!(section_kind(id), KIND_TEXTURE);
        assert_eq!(section_level(id), 8);
    }
}
