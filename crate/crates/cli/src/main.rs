use std::error::Error;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use octoslam::config::RunConfig;
use octoslam::eval::{ate, mesh_metrics, MetricReport, DEFAULT_CAP, DEFAULT_SAMPLE_DENSITY};
use octoslam::io::{list_scans, load_point_cloud, load_poses_kitti, load_scan_kitti, write_point_cloud_xyz, write_poses_kitti, write_scan_kitti};
use octoslam::mesh::{extract_map_mesh, TriangleMesh};
use octoslam::pipeline::{ScanReport, SlamState, Trajectory};
use octoslam::synth::{simulate_scan, ScanPattern, Scene};
use octoslam::{checkpoint, Pose};

type CliResult<T = ()> = Result<T, Box<dyn Error>>;

#[derive(Parser)]
#[command(name = "octoslam", version, about = "LiDAR mapping and odometry on a sparse octree neural field")]
struct Cli {
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for data-parallel loops (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// More log output; repeat for debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Track and map a scan sequence.
    Slam {
        #[arg(long)]
        config: PathBuf,
    },
    /// Map a scan sequence at known poses.
    Map {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        poses: PathBuf,
    },
    /// Extract the zero level set of a checkpoint as PLY.
    Mesh {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Lattice spacing in metres (default: the fine voxel size).
        #[arg(long)]
        resolution: Option<f64>,
    },
    /// Absolute trajectory error between two KITTI pose files.
    EvalTraj {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Accuracy, completeness and Chamfer distances of a mesh.
    EvalMap {
        #[arg(long)]
        mesh: PathBuf,
        /// `.bin`, `.ply` or `x y z` text.
        #[arg(long)]
        gt_cloud: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SAMPLE_DENSITY)]
        density: f64,
        #[arg(long, default_value_t = DEFAULT_CAP)]
        cap: f64,
    },
    /// Render a synthetic scan sequence from a scene file.
    Simulate {
        #[arg(long)]
        scene: PathBuf,
        /// KITTI pose file, one sensor pose per scan.
        #[arg(long)]
        trajectory: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 360)]
        azimuths: usize,
        #[arg(long, default_value_t = 16)]
        rings: usize,
        #[arg(long, default_value_t = -15.0, allow_negative_numbers = true)]
        min_elevation: f64,
        #[arg(long, default_value_t = 15.0, allow_negative_numbers = true)]
        max_elevation: f64,
        #[arg(long, default_value_t = 30.0)]
        max_range: f64,
        /// Range noise standard deviation in metres.
        #[arg(long, default_value_t = 0.01)]
        noise: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Slam { config } => slam(&config, cli.seed, None),
        Command::Map { config, poses } => slam(&config, cli.seed, Some(&poses)),
        Command::Mesh { checkpoint: path, out, resolution } => {
            let map = checkpoint::load(&path)?;
            let res = resolution.unwrap_or_else(|| map.fine_voxel_size());
            let mesh = extract_map_mesh(&map, res)?;
            mesh.write_ply(&out)?;
            println!("{} vertices, {} triangles -> {}", mesh.vertices.len(), mesh.triangles.len(), out.display());
            Ok(())
        }
        Command::EvalTraj { est, gt } => {
            let r = ate(&load_poses_kitti(&est)?, &load_poses_kitti(&gt)?)?;
            println!("ATE {:.3} m ({:.3} %) over {} poses", r.rmse, r.percent, r.pairs);
            print!("{}", MetricReport::from_ate(&r));
            Ok(())
        }
        Command::EvalMap { mesh, gt_cloud, density, cap } => {
            let mesh = TriangleMesh::read_ply(&mesh)?;
            let gt = load_point_cloud(&gt_cloud)?;
            let m = mesh_metrics(&mesh, &gt, density, cap, cli.seed.unwrap_or(0))?;
            print!("{}", MetricReport::from_map(&m));
            Ok(())
        }
        Command::Simulate { scene, trajectory, out, azimuths, rings, min_elevation, max_elevation, max_range, noise } => {
            let scene = Scene::load(&scene)?;
            let poses = load_poses_kitti(&trajectory)?;
            let pattern = ScanPattern::uniform(azimuths, rings, min_elevation, max_elevation, max_range, noise)?;
            simulate(&scene, &poses, &pattern, &out, cli.seed.unwrap_or(0))
        }
    }
}

fn simulate(scene: &Scene, poses: &Trajectory, pattern: &ScanPattern, out: &Path, seed: u64) -> CliResult {
    let scans = out.join("velodyne");
    std::fs::create_dir_all(&scans)?;
    let mut cloud = Vec::new();
    for (i, pose) in poses.entries() {
        let scan = simulate_scan(scene, pose, pattern, seed.wrapping_add(*i as u64), *i)?;
        cloud.extend(scan.points.iter().map(|p| pose.transform_point(p)));
        write_scan_kitti(&scan, &scans.join(format!("{i:06}.bin")))?;
        info!("scan {i}: {} points", scan.len());
    }
    write_poses_kitti(poses, &out.join("poses.txt"))?;
    write_point_cloud_xyz(&cloud, &out.join("gt_cloud.xyz"))?;
    std::fs::write(out.join("scene.txt"), scene.to_text())?;
    std::fs::write(out.join("seed.txt"), format!("{seed}\n"))?;
    println!("{} scans -> {}", poses.len(), out.display());
    Ok(())
}

/// Tracks and maps, or maps at `known` poses when given.
fn slam(config: &Path, seed: Option<u64>, known: Option<&Path>) -> CliResult {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let known = known.map(load_poses_kitti).transpose()?;
    let mut files = list_scans(&cfg.dataset.scans)?;
    if let Some(n) = cfg.dataset.limit {
        files.truncate(n);
    }
    if files.is_empty() {
        return Err(format!("no .bin scans in {}", cfg.dataset.scans.display()).into());
    }
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    std::fs::write(out.join("seed.txt"), format!("{}\n", cfg.seed))?;

    let mut state = SlamState::new(cfg.slam_config())?;
    let mut csv = format!("{}\n", ScanReport::CSV_HEADER);
    for (i, file) in files.iter().enumerate() {
        let scan = load_scan_kitti(file, i)?;
        let report = match &known {
            Some(t) => {
                let pose: &Pose = t.get(i).ok_or_else(|| format!("no pose for scan {i}"))?;
                state.process_scan_with_pose(&scan, pose)?
            }
            None => state.process_scan(&scan)?,
        };
        info!(
            "scan {i}: t = {:.3?}{}",
            report.pose.translation().as_slice(),
            if report.degraded { " (degraded)" } else { "" }
        );
        let _ = writeln!(csv, "{}", report.csv_row());
    }
    write_poses_kitti(&state.trajectory, &out.join("trajectory.txt"))?;
    checkpoint::save(&state.map, &out.join("checkpoint.bin"))?;
    std::fs::write(out.join("scans.csv"), csv)?;

    if let (None, Some(gt)) = (&known, &cfg.dataset.poses) {
        let r = ate(&state.trajectory, &load_poses_kitti(gt)?)?;
        let report = MetricReport::from_ate(&r);
        std::fs::write(out.join("metrics.csv"), format!("{}\n{}\n", MetricReport::CSV_HEADER, report.csv_row()))?;
        print!("{report}");
    }
    println!("{} scans -> {}", state.trajectory.len(), out.display());
    Ok(())
}
