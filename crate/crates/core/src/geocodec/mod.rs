//! Lossless geometry coding of the surfel octree.
//!
//! Streams, in file order: the base octree (occupancy down to the first leaf
//! level), per-level occupancy above it with contexts from rasterized virtual
//! nodes, per-level leaf flags, and per-level surfel attributes coded in three
//! conditioned passes (offsets, then normals, then radius).
//!
//! Encoder and decoder run the exact same traversal functions; the only
//! difference is whether each coded value is supplied or recovered, so the
//! context and model state sequences cannot diverge.

pub mod models;
pub mod rangecoder;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use nalgebra::Vector3;

use crate::container::{
    section_id, ContainerHeader, Section, SectionStats, KIND_ATTRIBUTES, KIND_BASE,
    KIND_LEAF_FLAGS, KIND_OCCUPANCY,
};
use crate::error::{Error, Result};
use crate::morton;
use crate::octree::{LevelsConfig, Node, OctreeCube, Surfel, SurfelOctree};
use crate::quant::{
    self, dequantize_surfel, normal_alphabet, offset_alphabet, quantize_surfel, radius_alphabet,
    QuantizedSurfel,
};

use models::{AdaptiveModel, ProbabilityModel, SymbolDecoder, SymbolEncoder};

/// How much already-decoded information conditions the attribute contexts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditioningMode {
    /// Attribute contexts use only virtual-neighbor presence.
    None,
    /// Normal and radius contexts additionally see offset buckets.
    Offset,
    /// Radius contexts additionally see normal buckets (full chain).
    OffsetNormal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeoCodecOptions {
    pub conditioning: ConditioningMode,
    /// When false, occupancy and attribute contexts ignore virtual nodes
    /// (rasterization still runs so both sides stay symmetric).
    pub use_virtual_context: bool,
}

impl Default for GeoCodecOptions {
    fn default() -> Self {
        GeoCodecOptions {
            conditioning: ConditioningMode::OffsetNormal,
            use_virtual_context: true,
        }
    }
}

impl GeoCodecOptions {
    fn to_byte(self) -> u8 {
        let mode = match self.conditioning {
            ConditioningMode::None => 0,
            ConditioningMode::Offset => 1,
            ConditioningMode::OffsetNormal => 2,
        };
        mode | if self.use_virtual_context { 0 } else { 4 }
    }

    fn from_byte(b: u8) -> Result<Self> {
        let conditioning = match b & 3 {
            0 => ConditioningMode::None,
            1 => ConditioningMode::Offset,
            2 => ConditioningMode::OffsetNormal,
            _ => return Err(Error::Format(format!("bad conditioning bits in {b:#04x}"))),
        };
        if b & !7 != 0 {
            return Err(Error::Format(format!("unknown codec option bits {b:#04x}")));
        }
        Ok(GeoCodecOptions {
            conditioning,
            use_virtual_context: b & 4 == 0,
        })
    }
}

/// True when the surfel disk (plane patch of radius `r` around `p` with
/// normal `n`) can intersect the closed cube: the plane reaches the cube's
/// corner span and the cube is within `r` of the disk center.
pub fn cube_surfel_intersects(
    cube: &OctreeCube,
    p: &Vector3<f64>,
    n: &Vector3<f64>,
    r: f64,
) -> bool {
    let a = cube.anchor();
    let w = cube.width();
    let mut d2 = 0.0;
    for axis in 0..3 {
        let c = p[axis].clamp(a[axis], a[axis] + w);
        d2 += (p[axis] - c) * (p[axis] - c);
    }
    if d2 > r * r {
        return false;
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for corner in 0..8 {
        let q = Vector3::new(
            a.x + if corner & 1 != 0 { w } else { 0.0 },
            a.y + if corner & 2 != 0 { w } else { 0.0 },
            a.z + if corner & 4 != 0 { w } else { 0.0 },
        );
        let s = (q - p).dot(n);
        lo = lo.min(s);
        hi = hi.max(s);
    }
    lo <= 0.0 && hi >= 0.0
}

/// An ancestor leaf's geometry carried down to a finer cube: same world
/// plane, offset re-expressed against this cube's anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct VirtualNode {
    pub key: u64,
    pub offset: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub radius: f64,
}

/// Context for coding one level: predicted (virtual) nodes vs the unknown
/// children awaiting occupancy bits. The two sets never overlap because
/// virtual nodes live inside coarser leaves, where no real nodes exist.
#[derive(Debug, Clone)]
pub struct LevelContext {
    pub level: u32,
    pub virtual_nodes: BTreeMap<u64, VirtualNode>,
    pub to_code: Vec<u64>,
}

fn descend_intersecting(
    cube: &OctreeCube,
    p: &Vector3<f64>,
    n: &Vector3<f64>,
    r: f64,
    target: u32,
    out: &mut Vec<u64>,
) {
    if !cube_surfel_intersects(cube, p, n, r) {
        return;
    }
    if cube.level == target {
        out.push(cube.morton());
        return;
    }
    for digit in 0..8 {
        descend_intersecting(&cube.child(digit), p, n, r, target, out);
    }
}

/// Virtual nodes at `target` from leaves at the given coarser levels.
fn rasterize_virtual(
    leaf_levels: &[u32],
    leaf_maps: &[BTreeMap<u64, Surfel>],
    depth: u32,
    target: u32,
) -> BTreeMap<u64, VirtualNode> {
    let mut out = BTreeMap::new();
    for (&level, leaves) in leaf_levels.iter().zip(leaf_maps) {
        if level >= target {
            continue;
        }
        for (&key, surfel) in leaves {
            let cube = OctreeCube::new(level, morton::morton_decode_unchecked(key), depth)
                .expect("stored keys are in range");
            let p = cube.anchor() + surfel.offset;
            let mut hits = Vec::new();
            descend_intersecting(&cube, &p, &surfel.normal, surfel.radius, target, &mut hits);
            for key in hits {
                let child = OctreeCube::new(target, morton::morton_decode_unchecked(key), depth)
                    .expect("descendant keys are in range");
                out.insert(
                    key,
                    VirtualNode {
                        key,
                        offset: p - child.anchor(),
                        normal: surfel.normal,
                        radius: surfel.radius,
                    },
                );
            }
        }
    }
    out
}

/// Builds the coding context for `level` from a tree whose levels below are
/// final: virtual nodes rasterized from all coarser leaves, and the unknown
/// children of split nodes at `level - 1`.
pub fn rasterize_context(tree: &SurfelOctree, level: u32) -> LevelContext {
    let mut leaf_levels = Vec::new();
    let mut leaf_maps = Vec::new();
    for &lv in &tree.config.leaf_levels {
        if lv < level {
            leaf_levels.push(lv);
            leaf_maps.push(
                tree.leaves_at(lv)
                    .map(|(k, s, _)| (k, *s))
                    .collect::<BTreeMap<_, _>>(),
            );
        }
    }
    let virtual_nodes = rasterize_virtual(&leaf_levels, &leaf_maps, tree.depth, level);
    let mut to_code = Vec::new();
    if level >= 1 {
        for (key, node) in tree.level_nodes(level - 1) {
            if matches!(node, Node::Split) {
                for digit in 0..8u64 {
                    to_code.push(key << 3 | digit);
                }
            }
        }
    }
    LevelContext {
        level,
        virtual_nodes,
        to_code,
    }
}

fn face_neighbors(key: u64, level: u32) -> impl Iterator<Item = u64> {
    let c = morton::morton_decode_unchecked(key);
    let side = 1i64 << level;
    (0..6).filter_map(move |i| {
        let axis = i / 2;
        let dir = if i % 2 == 0 { -1i64 } else { 1 };
        let mut q = [c[0] as i64, c[1] as i64, c[2] as i64];
        q[axis] += dir;
        if q[axis] < 0 || q[axis] >= side {
            None
        } else {
            Some(morton::morton_encode_unchecked([
                q[0] as u32,
                q[1] as u32,
                q[2] as u32,
            ]))
        }
    })
}

/// Symmetric coding channel: the encoder supplies each value, the decoder
/// recovers it; both run identical surrounding logic.
enum Io<'a> {
    Enc(&'a mut SymbolEncoder),
    Dec(SymbolDecoder<'a>),
}

impl Io<'_> {
    fn code(&mut self, model: &mut dyn ProbabilityModel, value: Option<u32>) -> Result<u32> {
        match self {
            Io::Enc(enc) => {
                let v = value.expect("encoder must supply the value");
                enc.encode(model, v);
                Ok(v)
            }
            Io::Dec(dec) => dec.decode(model),
        }
    }

    fn code_bit(&mut self, model: &mut dyn ProbabilityModel, value: Option<bool>) -> Result<bool> {
        Ok(self.code(model, value.map(u32::from))? == 1)
    }

    /// Running entropy estimate; zero on the decode side.
    fn est_bits(&self) -> f64 {
        match self {
            Io::Enc(enc) => enc.est_bits,
            Io::Dec(_) => 0.0,
        }
    }
}

type BinaryBank<K> = HashMap<K, AdaptiveModel>;

fn bank_model<K: std::hash::Hash + Eq>(bank: &mut BinaryBank<K>, key: K, k: usize) -> &mut AdaptiveModel {
    bank.entry(key).or_insert_with(|| AdaptiveModel::new(k))
}

/// Occupancy of levels 1..=l_min, breadth first. Context per child bit:
/// (level, 1-bits coded among earlier siblings, occupied face neighbors
/// among already-coded cubes of the same level).
fn code_base(
    io: &mut Io,
    truth: Option<&SurfelOctree>,
    l_min: u32,
    occupied: &mut [BTreeSet<u64>],
) -> Result<()> {
    let mut bank: BinaryBank<(u32, u8, u8)> = HashMap::new();
    occupied[0].insert(0);
    for l in 1..=l_min {
        let parents: Vec<u64> = occupied[(l - 1) as usize].iter().copied().collect();
        let mut coded: BTreeSet<u64> = BTreeSet::new();
        for parent in parents {
            let mut ones = 0u8;
            for digit in 0..8u64 {
                let child = parent << 3 | digit;
                let nbrs = face_neighbors(child, l)
                    .filter(|k| coded.contains(k))
                    .count() as u8;
                let model = bank_model(&mut bank, (l, ones, nbrs), 2);
                let bit = io.code_bit(model, truth.map(|t| t.node(l, child).is_some()))?;
                if bit {
                    coded.insert(child);
                    occupied[l as usize].insert(child);
                    ones += 1;
                }
            }
        }
    }
    Ok(())
}

/// Occupancy of one refinement level: a bit per unknown child of each split
/// parent, context (virtual face neighbors capped at 6, occupied earlier
/// siblings).
fn code_occupancy_level(
    io: &mut Io,
    truth: Option<&SurfelOctree>,
    level: u32,
    split_parents: &BTreeSet<u64>,
    virtual_nodes: &BTreeMap<u64, VirtualNode>,
    use_virtual: bool,
    occupied: &mut BTreeSet<u64>,
) -> Result<()> {
    let mut bank: BinaryBank<(u8, u8)> = HashMap::new();
    for &parent in split_parents {
        let mut ones = 0u8;
        for digit in 0..8u64 {
            let child = parent << 3 | digit;
            let vnbrs = if use_virtual {
                face_neighbors(child, level)
                    .filter(|k| virtual_nodes.contains_key(k))
                    .count()
                    .min(6) as u8
            } else {
                0
            };
            let model = bank_model(&mut bank, (vnbrs, ones), 2);
            let bit = io.code_bit(model, truth.map(|t| t.node(level, child).is_some()))?;
            if bit {
                occupied.insert(child);
                ones += 1;
            }
        }
    }
    Ok(())
}

/// Leaf-or-split flag per occupied node, one adaptive binary model for the
/// whole level. Returns the leaf keys.
fn code_leaf_flags(
    io: &mut Io,
    truth: Option<&SurfelOctree>,
    level: u32,
    occupied: &BTreeSet<u64>,
) -> Result<BTreeSet<u64>> {
    let mut model = AdaptiveModel::binary();
    let mut leaves = BTreeSet::new();
    for &key in occupied {
        let is_leaf = io.code_bit(
            &mut model,
            truth.map(|t| matches!(t.node(level, key), Some(Node::Leaf { .. }))),
        )?;
        if is_leaf {
            leaves.insert(key);
        }
    }
    Ok(leaves)
}

fn offset_bucket(i: u32, alphabet: u32) -> u8 {
    (i * 4 / alphabet) as u8
}

fn normal_bucket(i: u32) -> u8 {
    (i * 4 / normal_alphabet()) as u8
}

/// Three conditioned attribute passes over the level's leaves in Morton
/// order. Returns the reconstructed surfels.
#[allow(clippy::too_many_arguments)]
/// Entropy-estimate attribution of the attribute sections to their three
/// interleaved passes. The range coder emits one stream per level, so exact
/// per-pass byte counts do not exist; the model estimates are the principled
/// split (and track measured bytes closely, see the rate bound tests).
#[derive(Debug, Clone, Copy, Default)]
pub struct AttributeBits {
    pub offset: f64,
    pub normal: f64,
    pub radius: f64,
}

fn code_attributes(
    io: &mut Io,
    truth: Option<&SurfelOctree>,
    level: u32,
    depth: u32,
    leaf_keys: &BTreeSet<u64>,
    virtual_nodes: &BTreeMap<u64, VirtualNode>,
    options: &GeoCodecOptions,
    mut breakdown: Option<&mut AttributeBits>,
) -> Result<BTreeMap<u64, Surfel>> {
    let ka = offset_alphabet(level, depth);
    let kn = normal_alphabet();
    let kr = radius_alphabet(level, depth);
    let keys: Vec<u64> = leaf_keys.iter().copied().collect();

    // encoder side: recover exact indices, refusing off-lattice trees
    let quantized: Option<Vec<QuantizedSurfel>> = match truth {
        Some(tree) => {
            let mut qs = Vec::with_capacity(keys.len());
            for &key in &keys {
                let cube = tree.cube(level, key);
                let surfel = match tree.node(level, key) {
                    Some(Node::Leaf { surfel, .. }) => surfel,
                    _ => {
                        return Err(Error::Internal(format!(
                            "attribute pass expected a leaf at level {level}"
                        )))
                    }
                };
                let q = quantize_surfel(surfel, &cube)?;
                if dequantize_surfel(&q, level, depth) != *surfel {
                    return Err(Error::Precondition(format!(
                        "leaf at level {level} holds off-lattice attributes; \
                         quantize the tree before encoding"
                    )));
                }
                qs.push(q);
            }
            Some(qs)
        }
        None => None,
    };

    let vpresence: Vec<u8> = keys
        .iter()
        .map(|&key| {
            if options.use_virtual_context
                && face_neighbors(key, level).any(|k| virtual_nodes.contains_key(&k))
            {
                1
            } else {
                0
            }
        })
        .collect();

    let mut out: Vec<QuantizedSurfel> = vec![
        QuantizedSurfel {
            offset: [0; 3],
            normal: [0; 2],
            radius: 0,
        };
        keys.len()
    ];

    let pass_start = io.est_bits();
    let mut offset_bank: BinaryBank<(u8, u8)> = HashMap::new();
    for (i, _) in keys.iter().enumerate() {
        for axis in 0..3 {
            let model = bank_model(&mut offset_bank, (axis as u8, vpresence[i]), ka as usize);
            out[i].offset[axis] =
                io.code(model, quantized.as_ref().map(|q| q[i].offset[axis]))?;
        }
    }
    let after_offsets = io.est_bits();

    let mut normal_bank: BinaryBank<(u8, u8, u8)> = HashMap::new();
    for (i, _) in keys.iter().enumerate() {
        let obucket = if options.conditioning == ConditioningMode::None {
            0
        } else {
            offset_bucket(out[i].offset[0], ka) * 16
                + offset_bucket(out[i].offset[1], ka) * 4
                + offset_bucket(out[i].offset[2], ka)
        };
        for comp in 0..2 {
            let model = bank_model(
                &mut normal_bank,
                (comp as u8, vpresence[i], obucket),
                kn as usize,
            );
            out[i].normal[comp] =
                io.code(model, quantized.as_ref().map(|q| q[i].normal[comp]))?;
        }
    }
    let after_normals = io.est_bits();

    let mut radius_bank: BinaryBank<(u8, u8, u8)> = HashMap::new();
    for (i, _) in keys.iter().enumerate() {
        let obucket = if options.conditioning == ConditioningMode::None {
            0
        } else {
            offset_bucket(out[i].offset[0], ka) * 16
                + offset_bucket(out[i].offset[1], ka) * 4
                + offset_bucket(out[i].offset[2], ka)
        };
        let nbucket = if options.conditioning == ConditioningMode::OffsetNormal {
            normal_bucket(out[i].normal[0]) * 4 + normal_bucket(out[i].normal[1])
        } else {
            0
        };
        let model = bank_model(&mut radius_bank, (vpresence[i], obucket, nbucket), kr as usize);
        out[i].radius = io.code(model, quantized.as_ref().map(|q| q[i].radius))?;
    }
    if let Some(b) = breakdown.as_deref_mut() {
        b.offset += after_offsets - pass_start;
        b.normal += after_normals - after_offsets;
        b.radius += io.est_bits() - after_normals;
    }

    let mut surfels = BTreeMap::new();
    for (i, &key) in keys.iter().enumerate() {
        quant::validate_indices(&out[i], level, depth)
            .map_err(|e| Error::Stream(format!("decoded attributes invalid: {e}")))?;
        surfels.insert(key, dequantize_surfel(&out[i], level, depth));
    }
    Ok(surfels)
}

struct SectionSink {
    payloads: BTreeMap<u16, Vec<u8>>,
    stats: Vec<SectionStats>,
}

impl SectionSink {
    fn push(&mut self, id: u16, enc: SymbolEncoder, extra_bytes: usize) {
        let symbols = enc.n_symbols;
        let estimate_bits = enc.est_bits;
        let mut bytes = enc.finish();
        let total = bytes.len() + extra_bytes;
        self.stats.push(SectionStats {
            id,
            bytes: total,
            symbols,
            estimate_bits,
        });
        self.payloads
            .entry(id)
            .or_default()
            .append(&mut bytes);
    }
}

/// Encodes the quantized tree's geometry into container sections, returning
/// per-section accounting. Every leaf must sit exactly on the reconstruction
/// lattice (`quant::quantize_tree`).
pub fn encode_geometry(
    tree: &SurfelOctree,
    options: &GeoCodecOptions,
) -> Result<(Vec<Section>, Vec<SectionStats>)> {
    let (sections, stats, _) = encode_geometry_diagnostics(tree, options)?;
    Ok((sections, stats))
}

/// `encode_geometry` plus the attribute-pass estimate split.
pub fn encode_geometry_diagnostics(
    tree: &SurfelOctree,
    options: &GeoCodecOptions,
) -> Result<(Vec<Section>, Vec<SectionStats>, AttributeBits)> {
    tree.validate()?;
    let cfg = &tree.config;
    let l_min = cfg.l_min();
    let l_max = cfg.l_max();
    let base_id = section_id(KIND_BASE, 0);

    let mut sink = SectionSink {
        payloads: BTreeMap::new(),
        stats: Vec::new(),
    };
    sink.payloads.insert(base_id, vec![options.to_byte()]);
    for l in (l_min + 1)..=l_max {
        sink.payloads.insert(section_id(KIND_OCCUPANCY, l), Vec::new());
    }
    for &l in &cfg.leaf_levels {
        if l < l_max {
            sink.payloads.insert(section_id(KIND_LEAF_FLAGS, l), Vec::new());
        }
        sink.payloads.insert(section_id(KIND_ATTRIBUTES, l), Vec::new());
    }

    if tree.is_empty() {
        let ids: Vec<u16> = sink.payloads.keys().copied().collect();
        for id in ids {
            let bytes = sink.payloads[&id].len();
            sink.stats.push(SectionStats {
                id,
                bytes,
                symbols: 0,
                estimate_bits: 0.0,
            });
        }
        let sections = sink
            .payloads
            .into_iter()
            .map(|(id, bytes)| Section { id, bytes })
            .collect();
        return Ok((sections, sink.stats, AttributeBits::default()));
    }

    let mut attr_bits = AttributeBits::default();
    run_pipeline(
        Some(tree),
        tree.depth,
        cfg,
        options,
        Some(&mut sink),
        None,
        Some(&mut attr_bits),
    )?;

    let sections = sink
        .payloads
        .into_iter()
        .map(|(id, bytes)| Section { id, bytes })
        .collect();
    Ok((sections, sink.stats, attr_bits))
}

/// Rebuilds the quantized tree from container sections.
pub fn decode_geometry(sections: &[Section], header: &ContainerHeader) -> Result<SurfelOctree> {
    header.validate()?;
    let cfg = header.levels_config();
    let mut by_id: HashMap<u16, &[u8]> = HashMap::new();
    for s in sections {
        by_id.insert(s.id, &s.bytes);
    }
    let base = by_id
        .get(&section_id(KIND_BASE, 0))
        .ok_or_else(|| Error::Format("missing base geometry section".into()))?;
    if base.is_empty() {
        return Err(Error::Format("base geometry section has no option byte".into()));
    }
    let options = GeoCodecOptions::from_byte(base[0])?;
    let mut tree = SurfelOctree::new(header.depth, cfg.clone(), header.tau_db)?;
    if base.len() == 1 {
        return Ok(tree); // empty tree
    }
    let mut leaf_maps = run_pipeline(None, header.depth, &cfg, &options, None, Some(&by_id), None)?;
    for (li, &level) in cfg.leaf_levels.iter().enumerate() {
        for (key, surfel) in std::mem::take(&mut leaf_maps[li]) {
            tree.insert_leaf(level, key, surfel)
                .map_err(|e| Error::Stream(format!("inconsistent decoded structure: {e}")))?;
        }
    }
    tree.validate()
        .map_err(|e| Error::Stream(format!("decoded tree invalid: {e}")))?;
    Ok(tree)
}

/// Shared traversal: encodes when `tree`/`sink` are given, decodes when
/// `sources` is. Returns the per-leaf-level surfel maps.
fn run_pipeline(
    tree: Option<&SurfelOctree>,
    depth: u32,
    cfg: &LevelsConfig,
    options: &GeoCodecOptions,
    mut sink: Option<&mut SectionSink>,
    sources: Option<&HashMap<u16, &[u8]>>,
    mut attr_bits: Option<&mut AttributeBits>,
) -> Result<Vec<BTreeMap<u64, Surfel>>> {
    let l_min = cfg.l_min();
    let l_max = cfg.l_max();

    let source = |id: u16| -> Result<&[u8]> {
        let map = sources.expect("decode side has sources");
        map.get(&id)
            .copied()
            .ok_or_else(|| Error::Format(format!("missing geometry section {id:#06x}")))
    };

    let mut occupied: Vec<BTreeSet<u64>> = vec![BTreeSet::new(); (l_max + 1) as usize];

    // base octree
    let base_id = section_id(KIND_BASE, 0);
    if tree.is_some() {
        let mut enc = SymbolEncoder::new();
        let mut io = Io::Enc(&mut enc);
        code_base(&mut io, tree, l_min, &mut occupied)?;
        sink.as_mut().unwrap().push(base_id, enc, 1);
    } else {
        let bytes = source(base_id)?;
        let mut io = Io::Dec(SymbolDecoder::new(&bytes[1..])?);
        code_base(&mut io, None, l_min, &mut occupied)?;
    }

    let mut leaf_maps: Vec<BTreeMap<u64, Surfel>> = vec![BTreeMap::new(); cfg.leaf_levels.len()];
    let mut splits_prev: BTreeSet<u64> = BTreeSet::new();

    for l in l_min..=l_max {
        if l > l_min {
            let id = section_id(KIND_OCCUPANCY, l);
            let virtual_nodes = rasterize_virtual(&cfg.leaf_levels, &leaf_maps, depth, l);
            let mut level_occ = BTreeSet::new();
            if !splits_prev.is_empty() {
                if tree.is_some() {
                    let mut enc = SymbolEncoder::new();
                    let mut io = Io::Enc(&mut enc);
                    code_occupancy_level(
                        &mut io,
                        tree,
                        l,
                        &splits_prev,
                        &virtual_nodes,
                        options.use_virtual_context,
                        &mut level_occ,
                    )?;
                    sink.as_mut().unwrap().push(id, enc, 0);
                } else {
                    let mut io = Io::Dec(SymbolDecoder::new(source(id)?)?);
                    code_occupancy_level(
                        &mut io,
                        None,
                        l,
                        &splits_prev,
                        &virtual_nodes,
                        options.use_virtual_context,
                        &mut level_occ,
                    )?;
                }
            }
            occupied[l as usize] = level_occ;
        }

        let occ_now = occupied[l as usize].clone();
        if let Some(li) = cfg.leaf_levels.iter().position(|&x| x == l) {
            let virtual_nodes = rasterize_virtual(&cfg.leaf_levels, &leaf_maps, depth, l);
            let leaves = if l < l_max {
                let id = section_id(KIND_LEAF_FLAGS, l);
                if occ_now.is_empty() {
                    BTreeSet::new()
                } else if tree.is_some() {
                    let mut enc = SymbolEncoder::new();
                    let mut io = Io::Enc(&mut enc);
                    let leaves = code_leaf_flags(&mut io, tree, l, &occ_now)?;
                    sink.as_mut().unwrap().push(id, enc, 0);
                    leaves
                } else {
                    let mut io = Io::Dec(SymbolDecoder::new(source(id)?)?);
                    code_leaf_flags(&mut io, None, l, &occ_now)?
                }
            } else {
                occ_now.clone()
            };

            let id = section_id(KIND_ATTRIBUTES, l);
            let surfels = if leaves.is_empty() {
                BTreeMap::new()
            } else if tree.is_some() {
                let mut enc = SymbolEncoder::new();
                let mut io = Io::Enc(&mut enc);
                let s = code_attributes(
                    &mut io,
                    tree,
                    l,
                    depth,
                    &leaves,
                    &virtual_nodes,
                    options,
                    attr_bits.as_deref_mut(),
                )?;
                sink.as_mut().unwrap().push(id, enc, 0);
                s
            } else {
                let mut io = Io::Dec(SymbolDecoder::new(source(id)?)?);
                code_attributes(&mut io, None, l, depth, &leaves, &virtual_nodes, options, None)?
            };
            leaf_maps[li] = surfels;
            splits_prev = occ_now.difference(&leaves).copied().collect();
        } else {
            splits_prev = occ_now;
        }
    }

    Ok(leaf_maps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builder::{build_teso, BuildConfig};
    use crate::quant::quantize_tree;
    use crate::synthetic;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn header_for(tree: &SurfelOctree) -> ContainerHeader {
        ContainerHeader::new(tree.depth, &tree.config, tree.tau_db)
    }

    fn lattice_surfel(rng: &mut StdRng, level: u32, depth: u32) -> Surfel {
        let q = QuantizedSurfel {
            offset: [
                rng.random_range(0..offset_alphabet(level, depth)),
                rng.random_range(0..offset_alphabet(level, depth)),
                rng.random_range(0..offset_alphabet(level, depth)),
            ],
            normal: [rng.random_range(0..129), rng.random_range(0..129)],
            radius: rng.random_range(0..radius_alphabet(level, depth)),
        };
        dequantize_surfel(&q, level, depth)
    }

    /// Random structurally valid tree with lattice attributes.
    fn random_tree(rng: &mut StdRng, depth: u32, n_roots: usize) -> SurfelOctree {
        let cfg = LevelsConfig::default_for_depth(depth);
        let leaf_levels = cfg.leaf_levels.clone();
        let (l6, l7, l8) = (leaf_levels[0], leaf_levels[1], leaf_levels[2]);
        let mut tree = SurfelOctree::new(depth, cfg, 66.0).unwrap();
        let side = 1u64 << (3 * l6);
        let mut tops: BTreeSet<u64> = BTreeSet::new();
        while tops.len() < n_roots {
            tops.insert(rng.random_range(0..side));
        }
        for top in tops {
            match rng.random_range(0..3) {
                0 => {
                    let s = lattice_surfel(rng, l6, depth);
                    tree.insert_leaf(l6, top, s).unwrap();
                }
                1 => {
                    for digit in 0..8u64 {
                        if rng.random_range(0..8) < 3 {
                            let s = lattice_surfel(rng, l7, depth);
                            tree.insert_leaf(l7, top << 3 | digit, s).unwrap();
                        }
                    }
                }
                _ => {
                    for d1 in 0..8u64 {
                        for d2 in 0..8u64 {
                            if rng.random_range(0..8) < 2 {
                                let s = lattice_surfel(rng, l8, depth);
                                tree.insert_leaf(l8, top << 6 | d1 << 3 | d2, s).unwrap();
                            }
                        }
                    }
                }
            }
        }
        tree
    }

    #[test]
    fn intersection_examples() {
        let cube = OctreeCube::new(7, [0, 0, 0], 10).unwrap();
        // plane z=4 through the [0,8)^3 cube, center anchor, big radius
        let p = Vector3::new(4.0, 4.0, 4.0);
        assert!(cube_surfel_intersects(&cube, &p, &Vector3::z(), 20.0));
        // plane entirely below the cube
        let below = Vector3::new(4.0, 4.0, -3.0);
        assert!(!cube_surfel_intersects(&cube, &below, &Vector3::z(), 100.0));
        // plane crosses the cube but the disk center is too far laterally
        let r = 5.0;
        let far = Vector3::new(4.0 + 2.0 * r + 8.0, 4.0, 4.0);
        assert!(!cube_surfel_intersects(&cube, &far, &Vector3::z(), r));
        // touching a corner counts
        let touch = Vector3::new(4.0, 4.0, 8.0);
        assert!(cube_surfel_intersects(&cube, &touch, &Vector3::z(), 20.0));
    }

    #[test]
    fn rasterize_four_children() {
        let depth = 10;
        let cfg = LevelsConfig::with_default_patch_sizes(depth, vec![6, 7, 8]);
        let mut tree = SurfelOctree::new(depth, cfg, 66.0).unwrap();
        // leaf at level 6, plane z = anchor.z + 4 crossing only the lower children
        tree.insert_leaf(
            6,
            0,
            Surfel {
                offset: Vector3::new(8.0, 8.0, 4.0),
                normal: Vector3::z(),
                radius: 13.5,
            },
        )
        .unwrap();
        let ctx = rasterize_context(&tree, 7);
        assert_eq!(ctx.virtual_nodes.len(), 4);
        for node in ctx.virtual_nodes.values() {
            let c = morton::morton_decode_unchecked(node.key);
            assert_eq!(c[2], 0, "only lower-z children intersect");
        }
    }

    #[test]
    fn rasterize_empty_when_no_leaves_below() {
        let depth = 10;
        let cfg = LevelsConfig::with_default_patch_sizes(depth, vec![6, 7, 8]);
        let mut tree = SurfelOctree::new(depth, cfg, 66.0).unwrap();
        tree.insert_leaf(
            7,
            0,
            Surfel {
                offset: Vector3::new(4.0, 4.0, 4.0),
                normal: Vector3::z(),
                radius: 4.0,
            },
        )
        .unwrap();
        let ctx = rasterize_context(&tree, 7);
        assert!(ctx.virtual_nodes.is_empty());
    }

    #[test]
    fn rasterize_grandchildren_match_brute_force() {
        let depth = 10;
        let cfg = LevelsConfig::with_default_patch_sizes(depth, vec![6, 7, 8]);
        let mut tree = SurfelOctree::new(depth, cfg, 66.0).unwrap();
        let surfel = Surfel {
            offset: Vector3::new(7.25, 8.75, 6.25),
            normal: Vector3::new(1.0, 2.0, 4.0).normalize(),
            radius: 9.0,
        };
        tree.insert_leaf(6, 0o123, surfel).unwrap();
        let ctx = rasterize_context(&tree, 8);
        let cube = tree.cube(6, 0o123);
        let p = cube.anchor() + surfel.offset;
        let mut brute = BTreeSet::new();
        for local in 0..64u64 {
            let child = cube.descendant(8, local);
            if cube_surfel_intersects(&child, &p, &surfel.normal, surfel.radius) {
                brute.insert(child.morton());
            }
        }
        let got: BTreeSet<u64> = ctx.virtual_nodes.keys().copied().collect();
        assert_eq!(got, brute);
        assert!(!brute.is_empty());
        // virtual offsets re-express the same world position
        for node in ctx.virtual_nodes.values() {
            let child = tree.cube(8, node.key);
            assert!((child.anchor() + node.offset - p).norm() < 1e-12);
            assert_eq!(node.radius, surfel.radius);
        }
    }

    #[test]
    fn virtual_and_to_code_disjoint() {
        let cloud = synthetic::sphere_cloud(9, 45.0);
        let mut tree = build_teso(&cloud, &BuildConfig::new(9, 64.0)).unwrap();
        quantize_tree(&mut tree).unwrap();
        for level in [tree.config.leaf_levels[1], tree.config.leaf_levels[2]] {
            let ctx = rasterize_context(&tree, level);
            let to_code: BTreeSet<u64> = ctx.to_code.iter().copied().collect();
            assert!(to_code.is_disjoint(&ctx.virtual_nodes.keys().copied().collect()));
        }
    }

    #[test]
    fn empty_tree_roundtrip() {
        let cfg = LevelsConfig::default_for_depth(10);
        let tree = SurfelOctree::new(10, cfg, 66.0).unwrap();
        let (sections, stats) = encode_geometry(&tree, &GeoCodecOptions::default()).unwrap();
        assert!(stats.iter().all(|s| s.symbols == 0));
        let base = sections.iter().find(|s| s.id == section_id(KIND_BASE, 0)).unwrap();
        assert_eq!(base.bytes.len(), 1);
        let back = decode_geometry(&sections, &header_for(&tree)).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn single_path_base_is_tiny() {
        let depth = 10;
        let cfg = LevelsConfig::with_default_patch_sizes(depth, vec![6, 7, 8]);
        let mut tree = SurfelOctree::new(depth, cfg, 66.0).unwrap();
        let mut rng = StdRng::seed_from_u64(5);
        tree.insert_leaf(6, 0, lattice_surfel(&mut rng, 6, depth)).unwrap();
        let (sections, _) = encode_geometry(&tree, &GeoCodecOptions::default()).unwrap();
        let base = sections.iter().find(|s| s.id == section_id(KIND_BASE, 0)).unwrap();
        assert!(base.bytes.len() < 16, "base section is {} bytes", base.bytes.len());
        let back = decode_geometry(&sections, &header_for(&tree)).unwrap();
        assert!(back.geometry_eq(&tree));
    }

    #[test]
    fn full_shallow_tree_roundtrip() {
        let depth = 5;
        let cfg = LevelsConfig::with_default_patch_sizes(depth, vec![3]);
        let mut tree = SurfelOctree::new(depth, cfg, 60.0).unwrap();
        let mut rng = StdRng::seed_from_u64(6);
        for key in 0..512u64 {
            tree.insert_leaf(3, key, lattice_surfel(&mut rng, 3, depth)).unwrap();
        }
        let (sections, _) = encode_geometry(&tree, &GeoCodecOptions::default()).unwrap();
        let back = decode_geometry(&sections, &header_for(&tree)).unwrap();
        assert!(back.geometry_eq(&tree));
    }

    #[test]
    fn random_trees_roundtrip() {
        let mut rng = StdRng::seed_from_u64(7);
        for trial in 0..8 {
            let tree = random_tree(&mut rng, 10, 40);
            let (sections, stats) = encode_geometry(&tree, &GeoCodecOptions::default()).unwrap();
            let back = decode_geometry(&sections, &header_for(&tree)).unwrap();
            assert!(back.geometry_eq(&tree), "trial {trial}");
            // coded size within the estimate bound, per stream
            for s in &stats {
                let bits = s.bytes as f64 * 8.0;
                let extra = if s.id == section_id(KIND_BASE, 0) { 8.0 } else { 0.0 };
                assert!(
                    bits <= s.estimate_bits + 0.02 * s.symbols as f64 + 64.0 + extra,
                    "section {:#06x}: {bits} bits vs {}",
                    s.id,
                    s.estimate_bits
                );
            }
        }
    }

    #[test]
    fn built_tree_roundtrip_all_conditioning_modes() {
        let cloud = synthetic::sphere_cloud(9, 45.0);
        let mut tree = build_teso(&cloud, &BuildConfig::new(9, 64.0)).unwrap();
        quantize_tree(&mut tree).unwrap();
        for conditioning in [
            ConditioningMode::None,
            ConditioningMode::Offset,
            ConditioningMode::OffsetNormal,
        ] {
            for use_virtual_context in [true, false] {
                let options = GeoCodecOptions {
                    conditioning,
                    use_virtual_context,
                };
                let (sections, _) = encode_geometry(&tree, &options).unwrap();
                let back = decode_geometry(&sections, &header_for(&tree)).unwrap();
                assert!(back.geometry_eq(&tree), "{options:?}");
            }
        }
    }

    #[test]
    fn unquantized_tree_rejected() {
        let cloud = synthetic::sphere_cloud(9, 30.0);
        let tree = build_teso(&cloud, &BuildConfig::new(9, 64.0)).unwrap();
        let err = encode_geometry(&tree, &GeoCodecOptions::default());
        assert!(err.is_err(), "off-lattice tree must be refused");
    }

    #[test]
    fn virtual_context_shrinks_occupancy() {
        let cloud = synthetic::bumpy_sphere_cloud(9, 45.0, 2.0, 40.0);
        let mut tree = build_teso(&cloud, &BuildConfig::new(9, 55.0)).unwrap();
        quantize_tree(&mut tree).unwrap();
        // the signal needs mixed leaf levels: coarse leaves predicting finer
        let coarse: usize = tree.leaf_count_at(tree.config.leaf_levels[0])
            + tree.leaf_count_at(tree.config.leaf_levels[1]);
        assert!(coarse > 0, "fixture produced no coarse leaves");
        let occ_bytes = |use_virtual_context: bool| -> usize {
            let options = GeoCodecOptions {
                conditioning: ConditioningMode::OffsetNormal,
                use_virtual_context,
            };
            let (_, stats) = encode_geometry(&tree, &options).unwrap();
            stats
                .iter()
                .filter(|s| s.id >> 8 == KIND_OCCUPANCY as u16)
                .map(|s| s.bytes)
                .sum()
        };
        let with = occ_bytes(true);
        let without = occ_bytes(false);
        assert!(
            with < without,
            "occupancy with virtual context {with} B, without {without} B"
        );
    }

    #[test]
    fn conditioning_shrinks_correlated_attributes() {
        // leaves whose normals and radii are functions of their offsets
        let depth = 10;
        let cfg = LevelsConfig::with_default_patch_sizes(depth, vec![6, 7, 8]);
        let mut tree = SurfelOctree::new(depth, cfg, 66.0).unwrap();
        let mut rng = StdRng::seed_from_u64(8);
        let l8 = 8;
        let ka = offset_alphabet(l8, depth);
        let mut keys: BTreeSet<u64> = BTreeSet::new();
        while keys.len() < 3000 {
            keys.insert(rng.random_range(0..(1u64 << (3 * l8))));
        }
        for &key in &keys {
            let ox = rng.random_range(0..ka);
            let bucket = offset_bucket(ox, ka);
            let q = QuantizedSurfel {
                offset: [ox, rng.random_range(0..ka), rng.random_range(0..ka)],
                // normal index pinned to the offset bucket
                normal: [32 * bucket as u32 + 10, 64],
                radius: 7 * bucket as u32 + 3,
            };
            tree.insert_leaf(l8, key, dequantize_surfel(&q, l8, depth)).unwrap();
        }
        let attr_bytes = |conditioning: ConditioningMode| -> usize {
            let options = GeoCodecOptions {
                conditioning,
                use_virtual_context: true,
            };
            let (_, stats) = encode_geometry(&tree, &options).unwrap();
            stats
                .iter()
                .filter(|s| s.id >> 8 == KIND_ATTRIBUTES as u16)
                .map(|s| s.bytes)
                .sum()
        };
        let unconditioned = attr_bytes(ConditioningMode::None);
        let offset_only = attr_bytes(ConditioningMode::Offset);
        let full = attr_bytes(ConditioningMode::OffsetNormal);
        assert!(
            offset_only < unconditioned,
            "offset conditioning: {offset_only} vs {unconditioned}"
        );
        assert!(full <= offset_only, "full chain: {full} vs {offset_only}");
    }

    #[test]
    fn corrupt_bytes_never_panic() {
        let mut rng = StdRng::seed_from_u64(9);
        let tree = random_tree(&mut rng, 10, 12);
        let (sections, _) = encode_geometry(&tree, &GeoCodecOptions::default()).unwrap();
        let header = header_for(&tree);
        for si in 0..sections.len() {
            for pos in 0..sections[si].bytes.len() {
                let mut mutated: Vec<Section> = sections.clone();
                mutated[si].bytes[pos] ^= 0x5A;
                match decode_geometry(&mutated, &header) {
                    Err(_) => {}
                    Ok(t) => {
                        // a flip the decoder never reads can decode cleanly:
                        // the range coder's leading zero byte (dropped while
                        // priming the 32-bit code) and its flush tail
                        if t.geometry_eq(&tree) {
                            let len = mutated[si].bytes.len();
                            let stream_start = if si == 0 { 1 } else { 0 };
                            assert!(
                                pos == stream_start || pos + 5 >= len,
                                "mid-stream flip at section {si} byte {pos}/{len} was ignored"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn sections_follow_canonical_order() {
        let mut rng = StdRng::seed_from_u64(10);
        let tree = random_tree(&mut rng, 10, 10);
        let (sections, _) = encode_geometry(&tree, &GeoCodecOptions::default()).unwrap();
        let kinds: Vec<u16> = sections.iter().map(|s| s.id >> 8).collect();
        let mut sorted = kinds.clone();
        sorted.sort_unstable();
        assert_eq!(kinds, sorted, "sections must group base, occupancy, flags, attributes");
        assert_eq!(sections[0].id, section_id(KIND_BASE, 0));
    }
}
