use std::fmt::Write as _;

use super::TelemetryError;
use crate::ascend::stack::{Cluster, StackConfig};
use crate::config::Config;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Boundary {
    /// Cluster waiting on its servers; varies the server count.
    ClusterServer,
    /// A server waiting on its clients; varies the client count.
    ServerClient,
}

impl Boundary {
    pub fn as_str(self) -> &'static str {
        match self {
            Boundary::ClusterServer => "cluster_server",
            Boundary::ServerClient => "server_client",
        }
    }
}

#[derive(Clone, Debug)]
pub struct BenchPlan {
    pub servers: Vec<usize>,
    pub clients: Vec<usize>,
    /// Policy decisions per environment per round.
    pub batch_actions: usize,
    pub trials: usize,
    /// Untimed rounds before the trials.
    pub warmup: usize,
}

impl Default for BenchPlan {
    fn default() -> Self {
        Self { servers: vec![1, 2, 4, 8], clients: vec![1, 2, 4, 8], batch_actions: 4096, trials: 20, warmup: 1 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub boundary: Boundary,
    pub n_servers: usize,
    pub n_clients: usize,
    pub batch_actions: usize,
    pub trials: usize,
    pub mean: f64,
    pub std: f64,
    pub samples: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Least squares line through the points. R² is 1 for an exact fit and
/// for constant `y`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Option<LinearFit> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let ss_res: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Some(LinearFit { slope, intercept, r2 })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub const CSV_HEADER: &'static str = "boundary,n_servers,n_clients,batch_actions,trials,mean_s,std_s";

    pub fn rows_for(&self, b: Boundary) -> impl Iterator<Item = &BenchRow> {
        self.rows.iter().filter(move |r| r.boundary == b)
    }

    /// Mean time against server count at the cluster boundary.
    pub fn cluster_fit(&self) -> Option<LinearFit> {
        let (x, y): (Vec<f64>, Vec<f64>) = self.rows_for(Boundary::ClusterServer).map(|r| (r.n_servers as f64, r.mean)).unzip();
        linear_fit(&x, &y)
    }

    /// Largest over smallest mean time at the server boundary.
    pub fn client_band(&self) -> Option<f64> {
        let m: Vec<f64> = self.rows_for(Boundary::ServerClient).map(|r| r.mean).collect();
        let lo = m.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (!m.is_empty() && lo > 0.0).then(|| hi / lo)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.boundary.as_str(),
                r.n_servers,
                r.n_clients,
                r.batch_actions,
                r.trials,
                r.mean,
                r.std
            );
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        if let Some(f) = self.cluster_fit() {
            let _ = writeln!(s, "cluster_server slope={:.6}s/server intercept={:.6}s r2={:.4}", f.slope, f.intercept, f.r2);
        }
        if let Some(b) = self.client_band() {
            let _ = writeln!(s, "server_client max/min={b:.3}");
        }
        s
    }
}

fn row(boundary: Boundary, n_servers: usize, n_clients: usize, plan: &BenchPlan, samples: Vec<f64>) -> BenchRow {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = if samples.len() > 1 { samples.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    BenchRow { boundary, n_servers, n_clients, batch_actions: plan.batch_actions, trials: samples.len(), mean, std: var.sqrt(), samples }
}

/// Times one synchronize over the stack for every server count (one client
/// each, one environment per server, so load grows with servers) and every
/// client count (one server, so the same batch is split more ways).
pub fn bench_sync(cfg: &Config, plan: &BenchPlan) -> Result<BenchReport, TelemetryError> {
    if plan.trials < 20 {
        return Err(TelemetryError::Bench(format!("{} trials; at least 20 are needed", plan.trials)));
    }
    let err = |e: crate::ascend::stack::StackError| TelemetryError::Bench(e.to_string());
    let mut report = BenchReport::default();
    for &n in &plan.servers {
        let mut c = Cluster::new(cfg, &StackConfig::local(n, 1)).map_err(err)?;
        c.bench_prepare(plan.batch_actions).map_err(err)?;
        for _ in 0..plan.warmup {
            c.bench_round().map_err(err)?;
        }
        let samples = (0..plan.trials).map(|_| c.bench_round().map(|r| r.0)).collect::<Result<Vec<_>, _>>().map_err(err)?;
        log::info!("bench: {n} servers, mean {:.4}s", samples.iter().sum::<f64>() / samples.len() as f64);
        report.rows.push(row(Boundary::ClusterServer, n, 1, plan, samples));
    }
    for &n in &plan.clients {
        let mut c = Cluster::new(cfg, &StackConfig::local(1, n)).map_err(err)?;
        c.bench_prepare(plan.batch_actions).map_err(err)?;
        for _ in 0..plan.warmup {
            c.bench_round().map_err(err)?;
        }
        let samples = (0..plan.trials).map(|_| c.bench_round().map(|r| r.1[0])).collect::<Result<Vec<_>, _>>().map_err(err)?;
        log::info!("bench: {n} clients, mean {:.4}s", samples.iter().sum::<f64>() / samples.len() as f64);
        report.rows.push(row(Boundary::ServerClient, 1, n, plan, samples));
    }
    Ok(report)
}
