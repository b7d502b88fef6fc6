//! Output bundle: artifacts rendered in memory, a manifest with content
//! hashes, and the optional plot script. Rendering is separated from disk
//! writes so failure paths can still emit a manifest and the determinism
//! guarantee is a statement about bytes, not writer behaviour. Nothing
//! time- or host-dependent goes into the bundle: two runs with one seed
//! must agree byte for byte, manifest included.

use std::fmt::Write as _;
use std::path::Path;

use cmfg::fokker_planck::MassHistory;
use cmfg::hjb::EpsilonSchedule;
use cmfg::measure::MeasureTrajectory;
use cmfg::mfg_solver::MfgSolution;
use cmfg::Grid;
use serde::Serialize;

use crate::config::ScenarioConfig;

pub struct Artifact {
    pub name: String,
    pub bytes: Vec<u8>,
}

impl Artifact {
    pub fn new(name: &str, bytes: Vec<u8>) -> Artifact {
        Artifact { name: name.into(), bytes }
    }

    pub fn json<T: Serialize>(name: &str, value: &T) -> anyhow::Result<Artifact> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        Ok(Artifact::new(name, bytes))
    }
}

/// FNV-1a over the artifact bytes; recorded in the manifest so two bundles
/// can be compared without shipping the data.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[derive(Serialize)]
pub struct ManifestEntry {
    pub name: String,
    pub bytes: usize,
    pub fnv1a64: String,
}

#[derive(Serialize)]
pub struct Manifest<'a> {
    pub name: &'a str,
    pub version: String,
    pub run_kind: &'a str,
    pub seed: u64,
    pub outcome: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub artifacts: Vec<ManifestEntry>,
    pub config: &'a ScenarioConfig,
}

pub fn manifest_artifact(
    config: &ScenarioConfig,
    seed: u64,
    outcome: &str,
    error: Option<String>,
    artifacts: &[Artifact],
) -> anyhow::Result<Artifact> {
    let manifest = Manifest {
        name: &config.name,
        version: format!("cmfg-v{}", env!("CARGO_PKG_VERSION")),
        run_kind: config.run.kind_name(),
        seed,
        outcome,
        error,
        artifacts: artifacts
            .iter()
            .map(|a| ManifestEntry {
                name: a.name.clone(),
                bytes: a.bytes.len(),
                fnv1a64: format!("{:016x}", fnv1a64(&a.bytes)),
            })
            .collect(),
        config,
    };
    Artifact::json("manifest.json", &manifest)
}

pub fn write_bundle(out_dir: &Path, artifacts: &[Artifact]) -> std::io::Result<()> {
    std::fs::create_dir_all(out_dir)?;
    for a in artifacts {
        std::fs::write(out_dir.join(&a.name), &a.bytes)?;
    }
    Ok(())
}

/// Value field over the full mesh, boundary and ghost column included.
pub fn value_csv(sol: &MfgSolution) -> Artifact {
    let g = sol.grid;
    let mut s = String::from("k,t,i,x,u\n");
    for k in 0..=g.nt {
        let t = g.t(k);
        let row = sol.u.row(k);
        for i in 0..=g.nx + 1 {
            let _ = writeln!(s, "{},{},{},{},{}", k, t, i, g.x(i), row[i]);
        }
    }
    Artifact::new("value.csv", s.into_bytes())
}

/// Measure trajectory over the interior cells.
pub fn measure_csv(name: &str, grid: &Grid, m: &MeasureTrajectory) -> Artifact {
    let mut s = String::from("k,t,i,x,mass\n");
    for k in 0..=grid.nt {
        let t = grid.t(k);
        let row = m.row(k);
        for i in 1..=grid.nx {
            let _ = writeln!(s, "{},{},{},{},{}", k, t, i, grid.x(i), row[i - 1]);
        }
    }
    Artifact::new(name, s.into_bytes())
}

/// Per-time-node scalars: schedule, aggregate, mass accounting.
pub fn aggregate_csv(grid: &Grid, eps: &EpsilonSchedule, q_path: &[f64], mass: &MassHistory, tv: &[f64]) -> Artifact {
    let mut s = String::from("k,t,eps,q,eta,tv,absorbed_left,lost_right\n");
    for k in 0..=grid.nt {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            k,
            grid.t(k),
            eps.value(k),
            q_path[k],
            mass.eta[k],
            tv[k],
            mass.absorbed_left[k],
            mass.lost_right[k]
        );
    }
    Artifact::new("aggregate.csv", s.into_bytes())
}

/// t = 0 and t = T slices of both fields on the interior cells.
pub fn slices_csv(sol: &MfgSolution) -> Artifact {
    let g = sol.grid;
    let u0 = sol.u.row(0);
    let ut = sol.u.row(g.nt);
    let m0 = sol.m.row(0);
    let mt = sol.m.row(g.nt);
    let mut s = String::from("i,x,u0,u_end,m0,m_end\n");
    for i in 1..=g.nx {
        let _ = writeln!(s, "{},{},{},{},{},{}", i, g.x(i), u0[i], ut[i], m0[i - 1], mt[i - 1]);
    }
    Artifact::new("slices.csv", s.into_bytes())
}

/// Kernel slices as (x, y, K) triplets, y outermost.
pub fn kernel_csv(grid: &Grid, ys: &[f64], slices: &[Vec<f64>]) -> Artifact {
    let mut s = String::from("x,y,k\n");
    for (y, slice) in ys.iter().zip(slices) {
        for i in 0..=grid.nx + 1 {
            let _ = writeln!(s, "{},{},{}", grid.x(i), y, slice[i]);
        }
    }
    Artifact::new("kernel.csv", s.into_bytes())
}

/// Master-equation residual per interior node.
pub fn residual_csv(grid: &Grid, residual: &[f64]) -> Artifact {
    let mut s = String::from("x,r\n");
    for (i, r) in residual.iter().enumerate() {
        let _ = writeln!(s, "{},{}", grid.x(i + 1), r);
    }
    Artifact::new("residual.csv", s.into_bytes())
}

/// gnuplot script referencing whichever CSVs the run kind produced.
pub fn plotscript(artifacts: &[Artifact]) -> Artifact {
    let have = |n: &str| artifacts.iter().any(|a| a.name == n);
    let mut s = String::from("set datafile separator \",\"\nset key autotitle columnhead\nset grid\n");
    if have("aggregate.csv") {
        s.push_str(concat!(
            "set terminal png size 900,600; set output \"aggregate.png\"\n",
            "set xlabel \"t\"\n",
            "plot \"aggregate.csv\" using 2:4 with lines title \"Q*\", \\\n",
            "     \"aggregate.csv\" using 2:5 with lines title \"eta\", \\\n",
            "     \"aggregate.csv\" using 2:3 with lines title \"eps\"\n",
        ));
    }
    if have("slices.csv") {
        s.push_str(concat!(
            "set terminal png size 900,600; set output \"slices.png\"\n",
            "set xlabel \"x\"\n",
            "plot \"slices.csv\" using 2:3 with lines title \"u(x,0)\", \\\n",
            "     \"slices.csv\" using 2:5 with boxes title \"m0\", \\\n",
            "     \"slices.csv\" using 2:6 with boxes title \"m(T)\"\n",
        ));
    }
    if have("residual.csv") {
        s.push_str(concat!(
            "set terminal png size 900,600; set output \"residual.png\"\n",
            "set xlabel \"x\"\n",
            "plot \"residual.csv\" using 1:2 with lines title \"master residual\"\n",
        ));
    }
    if have("kernel.csv") {
        s.push_str(concat!(
            "set terminal png size 900,600; set output \"kernel.png\"\n",
            "set xlabel \"x\"\n",
            "plot \"kernel.csv\" using 1:3:2 with lines palette title \"K(x,y)\"\n",
        ));
    }
    if have("fp_error.csv") {
        s.push_str(concat!(
            "set terminal png size 900,600; set output \"fp_error.png\"\n",
            "set xlabel \"x\"\n",
            "plot \"fp_error.csv\" using 2:3 with lines title \"fd\", \\\n",
            "     \"fp_error.csv\" using 2:4 with lines title \"images\"\n",
        ));
    }
    if have("mc.csv") {
        s.push_str(concat!(
            "set terminal png size 900,600; set output \"mc.png\"\n",
            "set xlabel \"t\"\n",
            "plot \"mc.csv\" using 2:3 with lines title \"eta mc\", \\\n",
            "     \"mc.csv\" using 2:4 with lines title \"eta exact\"\n",
        ));
    }
    Artifact::new("plot.gp", s.into_bytes())
}
