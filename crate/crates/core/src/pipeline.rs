//! End-to-end composition: point cloud to container bytes and back.
//!
//! `encode_cloud` runs build, quantize, patch sampling, and both codecs;
//! `encode_tree` starts from a prepared tree. `decode_bytes` reverses the
//! container into a tree with patches. Rate accounting splits every emitted
//! byte into geometry, texture, and container overhead so that sweep totals
//! always match the file size.

use crate::builder::{build_teso, BuildConfig};
use crate::container::{
    self, ContainerHeader, Section, SectionStats, KIND_TEXTURE, TEX_CODEC_EXTERNAL_RAW,
    TEX_CODEC_INTERNAL_DCT,
};
use crate::error::Result;
use crate::geocodec::{decode_geometry, encode_geometry, GeoCodecOptions};
use crate::octree::SurfelOctree;
use crate::pointcloud::PointCloud;
use crate::quant::quantize_tree;
use crate::texcodec::{decode_texture, encode_texture, PackedLayout};
use crate::texture::{pack_patches, sample_patches, unpack_patches, DEFAULT_D_THRESH, DEFAULT_K};

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub build: BuildConfig,
    /// Texture quantizer scale, 1..=63; 0 skips the embedded texture stream
    /// (external atlas route).
    pub qt: u8,
    pub geo: GeoCodecOptions,
    /// Texture sampling: neighbor count and in-plane distance cutoff.
    pub k_texture: usize,
    pub d_thresh: f64,
}

impl PipelineConfig {
    pub fn new(depth: u32, tau_db: f64, qt: u8) -> Self {
        PipelineConfig {
            build: BuildConfig::new(depth, tau_db),
            qt,
            geo: GeoCodecOptions::default(),
            k_texture: DEFAULT_K,
            d_thresh: DEFAULT_D_THRESH,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EncodeSummary {
    pub bytes: Vec<u8>,
    pub header: ContainerHeader,
    pub geometry_bits: u64,
    pub texture_bits: u64,
    /// Magic, header fields, and section table.
    pub container_bits: u64,
    pub stats: Vec<SectionStats>,
}

impl EncodeSummary {
    pub fn total_bits(&self) -> u64 {
        self.bytes.len() as u64 * 8
    }
}

/// Serializes a quantized tree (with patches when `qt > 0`).
pub fn encode_tree(tree: &SurfelOctree, qt: u8, geo: &GeoCodecOptions) -> Result<EncodeSummary> {
    let (mut sections, mut stats) = encode_geometry(tree, geo)?;
    let mut header = ContainerHeader::new(tree.depth, &tree.config, tree.tau_db);
    header.qt = qt;
    if qt > 0 {
        let mut images = Vec::new();
        for &level in &tree.config.leaf_levels {
            images.push(pack_patches(tree, level)?);
        }
        let stream = encode_texture(&images, qt)?;
        sections.extend(stream.sections);
        stats.extend(stream.stats);
        header.tex_codec = TEX_CODEC_INTERNAL_DCT;
    } else {
        header.tex_codec = TEX_CODEC_EXTERNAL_RAW;
    }
    let bytes = container::serialize(&header, &sections)?;
    let mut geometry_bits = 0;
    let mut texture_bits = 0;
    for s in &sections {
        let bits = s.bytes.len() as u64 * 8;
        if container::section_kind(s.id) == KIND_TEXTURE {
            texture_bits += bits;
        } else {
            geometry_bits += bits;
        }
    }
    let container_bits = bytes.len() as u64 * 8 - geometry_bits - texture_bits;
    Ok(EncodeSummary {
        bytes,
        header,
        geometry_bits,
        texture_bits,
        container_bits,
        stats,
    })
}

/// Full pipeline: build, quantize, sample patches, encode. Returns the
/// quantized tree alongside the bitstream so callers can compare or render
/// without a decode pass.
pub fn encode_cloud(cloud: &PointCloud, cfg: &PipelineConfig) -> Result<(EncodeSummary, SurfelOctree)> {
    let mut tree = build_teso(cloud, &cfg.build)?;
    quantize_tree(&mut tree)?;
    sample_patches(&mut tree, cloud, cfg.k_texture, cfg.d_thresh)?;
    let summary = encode_tree(&tree, cfg.qt, &cfg.geo)?;
    Ok((summary, tree))
}

#[derive(Debug)]
pub struct DecodedModel {
    pub header: ContainerHeader,
    pub tree: SurfelOctree,
}

/// Parses a container and reconstructs the tree; texture patches are filled
/// in when the stream carries them (`qt > 0`).
pub fn decode_bytes(bytes: &[u8]) -> Result<DecodedModel> {
    let (header, sections) = container::parse(bytes)?;
    let mut tree = decode_geometry(&sections, &header)?;
    if header.qt > 0 {
        let layouts = texture_layouts(&tree);
        let images = decode_texture(&sections, header.qt, &layouts)?;
        for image in &images {
            unpack_patches(&mut tree, image)?;
        }
    }
    Ok(DecodedModel { header, tree })
}

/// Atlas layouts implied by the tree's geometry, one per leaf level. Both
/// codec directions derive them this way, so no layout data is transmitted.
pub fn texture_layouts(tree: &SurfelOctree) -> Vec<PackedLayout> {
    tree.config
        .leaf_levels
        .iter()
        .zip(&tree.config.patch_sizes)
        .map(|(&level, &m)| PackedLayout::for_level(level, m, tree.leaf_count_at(level)))
        .collect()
}

/// Geometry sections only; used by the external-texture route and `info`.
pub fn geometry_sections(sections: &[Section]) -> Vec<&Section> {
    sections
        .iter()
        .filter(|s| container::section_kind(s.id) != KIND_TEXTURE)
        .collect()
}
