//! `teso`: build, compress, decode, render, and evaluate textured surfel
//! octrees from the command line.
//!
//! Exit codes: 0 success, 1 pipeline failure, 2 usage error (bad flags,
//! missing input files).

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::Vector3;

use teso_core::builder::estimate_normals;
use teso_core::container;
use teso_core::geocodec::{ConditioningMode, GeoCodecOptions};
use teso_core::octree::LevelsConfig;
use teso_core::pipeline::{decode_bytes, encode_cloud, texture_layouts, PipelineConfig};
use teso_core::ply::{read_ply, write_ply, PlyFormat};
use teso_core::pointcloud::PointCloud;
use teso_core::render::{make_trajectory, read_trajectory, render, write_trajectory, Camera};
use teso_core::rdsweep::{pareto_hull, rd_sweep, write_csv, SweepSettings};
use teso_core::texcodec::import_external;
use teso_core::texture::{export_atlases, rasterize_to_cloud, unpack_patches};

#[derive(Parser)]
#[command(name = "teso", version, about = "Textured surfel octree toolkit")]
struct Cli {
    /// Worker thread count (default: all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, Default, ValueEnum)]
enum CondArg {
    None,
    Offset,
    #[default]
    OffsetNormal,
}

impl From<CondArg> for ConditioningMode {
    fn from(c: CondArg) -> Self {
        match c {
            CondArg::None => ConditioningMode::None,
            CondArg::Offset => ConditioningMode::Offset,
            CondArg::OffsetNormal => ConditioningMode::OffsetNormal,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Estimate normals for a PLY point cloud
    Normals {
        input: PathBuf,
        output: PathBuf,
        /// Neighbor count for the PCA plane fit
        #[arg(long, default_value_t = 16)]
        k: usize,
        /// Write ASCII PLY instead of binary
        #[arg(long)]
        ascii: bool,
    },
    /// Build a surfel octree and write the compressed container
    Build {
        input: PathBuf,
        output: PathBuf,
        /// Split threshold in dB
        #[arg(long, default_value_t = 60.0)]
        tau: f64,
        /// Override the inferred grid depth
        #[arg(long)]
        depth: Option<u32>,
        /// Leaf levels, e.g. 6,7,8
        #[arg(long, value_delimiter = ',')]
        levels: Option<Vec<u32>>,
        /// Patch sides per leaf level, e.g. 12,8,4
        #[arg(long = "patch-sizes", value_delimiter = ',')]
        patch_sizes: Option<Vec<u32>>,
        /// Texture quantizer scale 1..63
        #[arg(long, default_value_t = 25)]
        qt: u8,
        /// Neighbors for normal estimation when the input has none
        #[arg(long, default_value_t = 16)]
        k: usize,
    },
    /// Build, quantize, and entropy-code with full codec controls
    Encode {
        input: PathBuf,
        output: PathBuf,
        #[arg(long, default_value_t = 60.0)]
        tau: f64,
        #[arg(long)]
        depth: Option<u32>,
        #[arg(long, value_delimiter = ',')]
        levels: Option<Vec<u32>>,
        #[arg(long = "patch-sizes", value_delimiter = ',')]
        patch_sizes: Option<Vec<u32>>,
        #[arg(long, default_value_t = 25)]
        qt: u8,
        #[arg(long, default_value_t = 16)]
        k: usize,
        /// Attribute conditioning chain
        #[arg(long, value_enum, default_value_t)]
        conditioning: CondArg,
        /// Disable virtual-neighbor occupancy contexts
        #[arg(long = "no-virtual-context")]
        no_virtual_context: bool,
        /// Skip the embedded texture stream; write lossless atlases here
        #[arg(long = "external-texture")]
        external_texture: Option<PathBuf>,
    },
    /// Decode a container into geometry and texture artifacts
    Decode {
        input: PathBuf,
        outdir: PathBuf,
        /// Also rasterize patches to a colored point cloud PLY
        #[arg(long)]
        rasterize: bool,
        /// Import external atlases (from encode --external-texture)
        #[arg(long = "texture-dir")]
        texture_dir: Option<PathBuf>,
        #[arg(long)]
        ascii: bool,
    },
    /// Render one camera or a whole trajectory
    Render {
        input: PathBuf,
        /// PNG path (--camera) or output directory (--trajectory)
        output: PathBuf,
        /// Inline camera: px,py,pz,lx,ly,lz,ux,uy,uz,fov
        #[arg(long)]
        camera: Option<String>,
        /// Trajectory file from the `trajectory` subcommand
        #[arg(long)]
        trajectory: Option<PathBuf>,
        /// Square image side in pixels
        #[arg(long, default_value_t = 1024)]
        res: u32,
        /// Background color r,g,b in [0,1]
        #[arg(long, default_value = "0,0,0")]
        background: String,
    },
    /// Generate an orbit trajectory file
    Trajectory {
        output: PathBuf,
        #[arg(long)]
        frames: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Orbit center in voxels
        #[arg(long, default_value = "512,512,512")]
        center: String,
    },
    /// Rate-distortion sweep over tau and Qt, written as CSV
    Eval {
        input: PathBuf,
        output: PathBuf,
        #[arg(long = "tau-set", value_delimiter = ',', default_value = "60,62,64,66")]
        tau_set: Vec<f64>,
        #[arg(long = "qt-set", value_delimiter = ',', default_value = "10,25,40")]
        qt_set: Vec<u8>,
        #[arg(long, default_value_t = 256)]
        res: u32,
        #[arg(long, default_value_t = 4)]
        frames: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        depth: Option<u32>,
        #[arg(long, default_value_t = 16)]
        k: usize,
    },
    /// Print the container header and per-section byte breakdown
    Info { input: PathBuf },
}

/// Error that should exit with the usage code.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl std::error::Error for Usage {}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(anyhow!(Usage(format!("no such file: {}", path.display()))))
    }
}

fn parse_floats(s: &str, n: usize, what: &str) -> Result<Vec<f64>> {
    let vals: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| anyhow!(Usage(format!("{what}: expected {n} comma-separated numbers, got {s:?}"))))?;
    if vals.len() != n {
        return Err(anyhow!(Usage(format!(
            "{what}: expected {n} comma-separated numbers, got {}",
            vals.len()
        ))));
    }
    Ok(vals)
}

fn parse_vec3(s: &str, what: &str) -> Result<Vector3<f64>> {
    let v = parse_floats(s, 3, what)?;
    Ok(Vector3::new(v[0], v[1], v[2]))
}

fn load_cloud(path: &Path, depth: Option<u32>, k: usize) -> Result<PointCloud> {
    require_file(path)?;
    let mut cloud = read_ply(path).with_context(|| format!("reading {}", path.display()))?;
    if let Some(d) = depth {
        if d < cloud.depth {
            return Err(anyhow!(Usage(format!(
                "--depth {d} is below the inferred depth {} of {}",
                cloud.depth,
                path.display()
            ))));
        }
        cloud.depth = d;
    }
    if cloud.normals.is_none() {
        let n = estimate_normals(&mut cloud, k)?;
        eprintln!("estimated normals for {n} points (k = {k})");
    }
    Ok(cloud)
}

#[allow(clippy::too_many_arguments)]
fn encode_run(
    input: &Path,
    output: &Path,
    tau: f64,
    depth: Option<u32>,
    levels: Option<Vec<u32>>,
    patch_sizes: Option<Vec<u32>>,
    qt: u8,
    k: usize,
    geo: GeoCodecOptions,
    external_texture: Option<&Path>,
) -> Result<()> {
    let cloud = load_cloud(input, depth, k)?;
    let effective_qt = if external_texture.is_some() { 0 } else { qt };
    let mut cfg = PipelineConfig::new(cloud.depth, tau, effective_qt);
    if let Some(levels) = levels {
        let mut lc = LevelsConfig::with_default_patch_sizes(cloud.depth, levels);
        if let Some(ms) = patch_sizes {
            if ms.len() != lc.leaf_levels.len() {
                return Err(anyhow!(Usage(format!(
                    "--patch-sizes needs {} entries to match --levels",
                    lc.leaf_levels.len()
                ))));
            }
            lc.patch_sizes = ms;
        }
        cfg.build.levels = lc;
    } else if patch_sizes.is_some() {
        return Err(anyhow!(Usage("--patch-sizes requires --levels".into())));
    }
    cfg.geo = geo;
    let (summary, tree) = encode_cloud(&cloud, &cfg)?;
    std::fs::write(output, &summary.bytes)
        .with_context(|| format!("writing {}", output.display()))?;
    if let Some(dir) = external_texture {
        export_atlases(&tree, dir)?;
        eprintln!("external atlases written to {}", dir.display());
    }
    println!(
        "{} points -> {} leaves, {} bytes ({} geometry, {} texture, {} container), {:.3} bpp",
        cloud.len(),
        tree.leaf_count(),
        summary.bytes.len(),
        summary.geometry_bits / 8,
        summary.texture_bits / 8,
        summary.container_bits / 8,
        summary.total_bits() as f64 / cloud.len() as f64
    );
    Ok(())
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Normals {
            input,
            output,
            k,
            ascii,
        } => {
            require_file(&input)?;
            let mut cloud = read_ply(&input)?;
            let n = estimate_normals(&mut cloud, k)?;
            let format = if ascii {
                PlyFormat::Ascii
            } else {
                PlyFormat::BinaryLittleEndian
            };
            write_ply(&cloud, &output, format)?;
            println!("estimated normals for {n} points (k = {k})");
            Ok(())
        }
        Cmd::Build {
            input,
            output,
            tau,
            depth,
            levels,
            patch_sizes,
            qt,
            k,
        } => encode_run(
            &input,
            &output,
            tau,
            depth,
            levels,
            patch_sizes,
            qt,
            k,
            GeoCodecOptions::default(),
            None,
        ),
        Cmd::Encode {
            input,
            output,
            tau,
            depth,
            levels,
            patch_sizes,
            qt,
            k,
            conditioning,
            no_virtual_context,
            external_texture,
        } => encode_run(
            &input,
            &output,
            tau,
            depth,
            levels,
            patch_sizes,
            qt,
            k,
            GeoCodecOptions {
                conditioning: conditioning.into(),
                use_virtual_context: !no_virtual_context,
            },
            external_texture.as_deref(),
        ),
        Cmd::Decode {
            input,
            outdir,
            rasterize,
            texture_dir,
            ascii,
        } => {
            require_file(&input)?;
            let bytes = std::fs::read(&input)?;
            let mut model = decode_bytes(&bytes)?;
            std::fs::create_dir_all(&outdir)?;
            if let Some(dir) = texture_dir {
                let layouts = texture_layouts(&model.tree);
                for image in &import_external(&dir, &layouts)? {
                    unpack_patches(&mut model.tree, image)?;
                }
            }
            let format = if ascii {
                PlyFormat::Ascii
            } else {
                PlyFormat::BinaryLittleEndian
            };
            let tree = &model.tree;
            let has_patches = tree.leaves().all(|(_, _, _, p)| p.is_some());
            // surfel centers with normals; colors from patch means when present
            let mut surfels = PointCloud::new(tree.depth);
            let mut normals = Vec::new();
            for (level, key, surfel, patch) in tree.leaves() {
                let cube = tree.cube(level, key);
                surfels.positions.push(surfel.center(&cube));
                normals.push(surfel.normal);
                surfels
                    .colors
                    .push(patch.map_or(Vector3::from_element(0.5), |p| p.mean_color()));
            }
            surfels.normals = Some(normals);
            write_ply(&surfels, &outdir.join("surfels.ply"), format)?;
            if has_patches && tree.leaf_count() > 0 {
                export_atlases(tree, &outdir)?;
                if rasterize {
                    let cloud = rasterize_to_cloud(tree)?;
                    write_ply(&cloud, &outdir.join("points.ply"), format)?;
                }
            } else if rasterize {
                return Err(anyhow!(
                    "cannot rasterize: the container has no texture stream (try --texture-dir)"
                ));
            }
            println!(
                "decoded {} leaves (depth {}, qt {}) into {}",
                tree.leaf_count(),
                tree.depth,
                model.header.qt,
                outdir.display()
            );
            Ok(())
        }
        Cmd::Render {
            input,
            output,
            camera,
            trajectory,
            res,
            background,
        } => {
            require_file(&input)?;
            if res == 0 {
                return Err(anyhow!(Usage("--res must be positive".into())));
            }
            let bg = {
                let v = parse_floats(&background, 3, "--background")?;
                Vector3::new(v[0] as f32, v[1] as f32, v[2] as f32)
            };
            // resolve all usage errors before touching the container
            let single = camera.is_some();
            let cams = match (camera, trajectory) {
                (Some(spec), None) => {
                    let v = parse_floats(&spec, 10, "--camera")?;
                    vec![Camera::new(
                        Vector3::new(v[0], v[1], v[2]),
                        Vector3::new(v[3], v[4], v[5]),
                        Vector3::new(v[6], v[7], v[8]),
                        v[9],
                        res,
                        res,
                    )?]
                }
                (None, Some(path)) => {
                    require_file(&path)?;
                    read_trajectory(&path, res, res)?
                }
                _ => {
                    return Err(anyhow!(Usage(
                        "render needs exactly one of --camera or --trajectory".into()
                    )))
                }
            };
            let model = decode_bytes(&std::fs::read(&input)?)?;
            if single {
                let img = render(&model.tree, &cams[0], bg)?;
                img.save_png(&output)?;
                println!("wrote {}", output.display());
            } else {
                std::fs::create_dir_all(&output)?;
                for (i, cam) in cams.iter().enumerate() {
                    let img = render(&model.tree, cam, bg)?;
                    img.save_png(&output.join(format!("frame_{i:04}.png")))?;
                }
                println!("wrote {} frames to {}", cams.len(), output.display());
            }
            Ok(())
        }
        Cmd::Trajectory {
            output,
            frames,
            seed,
            center,
        } => {
            let center = parse_vec3(&center, "--center")?;
            let cams = make_trajectory(frames, center, seed, 1024, 1024)?;
            write_trajectory(&cams, &output)?;
            println!("wrote {} frames to {}", cams.len(), output.display());
            Ok(())
        }
        Cmd::Eval {
            input,
            output,
            tau_set,
            qt_set,
            res,
            frames,
            seed,
            depth,
            k,
        } => {
            let cloud = load_cloud(&input, depth, k)?;
            let center = Vector3::from_element((1u64 << cloud.depth) as f64 / 2.0);
            let settings = SweepSettings {
                depth: cloud.depth,
                tau_set,
                qt_set,
                cameras: make_trajectory(frames, center, seed, res, res)?,
                background: Vector3::zeros(),
            };
            let points = rd_sweep(&cloud, &settings)?;
            write_csv(&points, &output)?;
            let hull = pareto_hull(&points);
            println!(
                "{} rate-distortion points -> {}; hull has {} points",
                points.len(),
                output.display(),
                hull.len()
            );
            Ok(())
        }
        Cmd::Info { input } => {
            require_file(&input)?;
            let bytes = std::fs::read(&input)?;
            let (header, sections) = container::parse(&bytes)?;
            println!(
                "depth={} l_min={} l_max={}",
                header.depth,
                header.l_min(),
                header.l_max()
            );
            println!(
                "version {}, tau {:.1} dB, qt {}, geometry codec {}, texture codec {}",
                header.version, header.tau_db, header.qt, header.geom_codec, header.tex_codec
            );
            let levels: Vec<String> = header.leaf_levels.iter().map(u32::to_string).collect();
            let sizes: Vec<String> = header.patch_sizes.iter().map(u32::to_string).collect();
            println!(
                "leaf levels {} with patch sides {}",
                levels.join(","),
                sizes.join(",")
            );
            println!(
                "steps: offset {}, normal {}, radius {}",
                header.offset_step, header.normal_step, header.radius_step
            );
            println!("{:<12} {:>5} {:>10}", "section", "level", "bytes");
            let mut payload = 0usize;
            for s in &sections {
                let kind = match container::section_kind(s.id) {
                    container::KIND_BASE => "base",
                    container::KIND_OCCUPANCY => "occupancy",
                    container::KIND_LEAF_FLAGS => "leaf-flags",
                    container::KIND_ATTRIBUTES => "attributes",
                    container::KIND_TEXTURE => "texture",
                    _ => "unknown",
                };
                println!(
                    "{:<12} {:>5} {:>10}",
                    kind,
                    container::section_level(s.id),
                    s.bytes.len()
                );
                payload += s.bytes.len();
            }
            println!(
                "{} sections, {} payload bytes, {} file bytes",
                sections.len(),
                payload,
                bytes.len()
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        // ignore failure: the global pool may already exist in tests
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
