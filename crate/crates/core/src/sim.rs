//! Euler–Maruyama simulation of OU processes with additive compound-Poisson
//! jumps, and assembly of the observed panel.
//!
//! Jumps are added at step granularity; positions within a step are not
//! resolved.

use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::invert_psi;

/// Draws jump sizes for one channel.
pub trait JumpSizeSampler: Send + Sync + fmt::Debug {
    fn sample(&self, rng: &mut dyn RngCore) -> f64;
}

/// Jump law of one coordinate: intensity per unit time and size distribution.
#[derive(Clone, Debug)]
pub enum JumpSize {
    Gaussian {
        intensity: f64,
        mean: f64,
        variance: f64,
    },
    Custom {
        intensity: f64,
        sampler: Arc<dyn JumpSizeSampler>,
    },
}

impl JumpSize {
    pub fn none() -> Self {
        JumpSize::Gaussian {
            intensity: 0.0,
            mean: 0.0,
            variance: 0.0,
        }
    }

    /// Centered Gaussian sizes.
    pub fn gaussian(intensity: f64, variance: f64) -> Self {
        JumpSize::Gaussian {
            intensity,
            mean: 0.0,
            variance,
        }
    }

    pub fn intensity(&self) -> f64 {
        match self {
            JumpSize::Gaussian { intensity, .. } | JumpSize::Custom { intensity, .. } => *intensity,
        }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            JumpSize::Gaussian { mean, variance, .. } => {
                let z: f64 = rng.sample(StandardNormal);
                mean + variance.sqrt() * z
            }
            JumpSize::Custom { sampler, .. } => sampler.sample(rng),
        }
    }

    fn validate(&self, ctx: &str) -> Result<()> {
        let lambda = self.intensity();
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::InvalidSpec(format!(
                "{ctx}: jump intensity must be finite and >= 0"
            )));
        }
        if let JumpSize::Gaussian { mean, variance, .. } = self {
            if !mean.is_finite() || !(variance.is_finite() && *variance >= 0.0) {
                return Err(Error::InvalidSpec(format!(
                    "{ctx}: jump mean must be finite and variance finite and >= 0"
                )));
            }
        }
        Ok(())
    }
}

/// `dX = -A (X - mu) dt + S dW + dJ` with one independent jump channel per
/// coordinate.
#[derive(Clone, Debug)]
pub struct OUJumpSpec {
    pub drift_rate: DMatrix<f64>,
    pub drift_level: DVector<f64>,
    /// `d x r`
    pub diffusion: DMatrix<f64>,
    pub jumps: Vec<JumpSize>,
    pub x0: DVector<f64>,
}

impl OUJumpSpec {
    /// Diagonal drift and diffusion, centered Gaussian jumps.
    pub fn diagonal(
        rates: &[f64],
        levels: &[f64],
        diffusions: &[f64],
        intensities: &[f64],
        jump_variances: &[f64],
        x0: &[f64],
    ) -> Self {
        OUJumpSpec {
            drift_rate: DMatrix::from_diagonal(&DVector::from_column_slice(rates)),
            drift_level: DVector::from_column_slice(levels),
            diffusion: DMatrix::from_diagonal(&DVector::from_column_slice(diffusions)),
            jumps: intensities
                .iter()
                .zip(jump_variances)
                .map(|(&l, &v)| JumpSize::gaussian(l, v))
                .collect(),
            x0: DVector::from_column_slice(x0),
        }
    }

    pub fn dim(&self) -> usize {
        self.x0.len()
    }

    /// Same process with every jump channel switched off.
    pub fn without_jumps(&self) -> Self {
        let mut out = self.clone();
        out.jumps = vec![JumpSize::none(); self.dim()];
        out
    }

    pub fn validate(&self, ctx: &str) -> Result<()> {
        let d = self.dim();
        if self.drift_rate.shape() != (d, d) {
            return Err(Error::InvalidSpec(format!(
                "{ctx}: drift_rate must be {d}x{d}, got {}x{}",
                self.drift_rate.nrows(),
                self.drift_rate.ncols()
            )));
        }
        if self.drift_level.len() != d {
            return Err(Error::InvalidSpec(format!("{ctx}: drift_level must have length {d}")));
        }
        if self.diffusion.nrows() != d {
            return Err(Error::InvalidSpec(format!("{ctx}: diffusion must have {d} rows")));
        }
        if self.jumps.len() != d {
            return Err(Error::InvalidSpec(format!("{ctx}: expected {d} jump channels")));
        }
        let all_finite = self.drift_rate.iter().all(|v| v.is_finite())
            && self.drift_level.iter().all(|v| v.is_finite())
            && self.diffusion.iter().all(|v| v.is_finite())
            && self.x0.iter().all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::InvalidSpec(format!("{ctx}: parameters must be finite")));
        }
        for (k, j) in self.jumps.iter().enumerate() {
            j.validate(&format!("{ctx} channel {k}"))?;
        }
        Ok(())
    }
}

/// Independent RNG substream.
#[derive(Clone, Debug)]
pub struct RandomStream(ChaCha8Rng);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProcessTag {
    Xi = 1,
    Delta = 2,
    Eps = 3,
    Zeta = 4,
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RandomStream {
    pub fn from_seed(seed: u64) -> Self {
        RandomStream(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Substream keyed by `(master_seed, tag, replication)`; independent of
    /// the order in which substreams are created.
    pub fn derive(master_seed: u64, tag: u64, replication: u64) -> Self {
        let key = mix(mix(mix(master_seed) ^ tag) ^ replication.wrapping_mul(0xD6E8_FEB8_6659_FD93));
        Self::from_seed(key)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.0
    }
}

/// Latent path plus the jumps that were added.
#[derive(Clone, Debug)]
pub struct LatentPath {
    pub dim: usize,
    /// `(n + 1) x dim`, row-major.
    pub data: Vec<f64>,
    /// Number of jumps per channel.
    pub channel_counts: Vec<u64>,
    /// `(step, total jump displacement)` for steps with at least one jump;
    /// step `i` is the increment from `t_i` to `t_{i+1}`.
    pub jumps: Vec<(usize, Vec<f64>)>,
}

impl LatentPath {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn steps(&self) -> usize {
        self.data.len() / self.dim.max(1) - 1
    }
}

fn poisson_by_inversion(u: f64, mean: f64) -> u64 {
    let mut p = (-mean).exp();
    let mut cdf = p;
    let mut k = 0u64;
    while u >= cdf && k < 10_000 {
        k += 1;
        p *= mean / k as f64;
        cdf += p;
        if p == 0.0 {
            break;
        }
    }
    k
}

fn check_grid(n: usize, h: f64) -> Result<()> {
    if n < 1 {
        return Err(Error::InvalidConfig("n must be >= 1".into()));
    }
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::InvalidConfig("h must be finite and > 0".into()));
    }
    Ok(())
}

pub fn simulate_latent(spec: &OUJumpSpec, n: usize, h: f64, stream: &mut RandomStream) -> Result<LatentPath> {
    check_grid(n, h)?;
    spec.validate("process")?;
    let d = spec.dim();
    let r = spec.diffusion.ncols();
    let rng = stream.rng();
    let sqrt_h = h.sqrt();
    let a = &spec.drift_rate;
    let s = &spec.diffusion;
    let means: Vec<f64> = spec.jumps.iter().map(|j| j.intensity() * h).collect();

    let mut data = Vec::with_capacity((n + 1) * d);
    data.extend_from_slice(spec.x0.as_slice());
    let mut x = spec.x0.as_slice().to_vec();
    let mut next = vec![0.0; d];
    let mut z = vec![0.0; r];
    let mut jump = vec![0.0; d];
    let mut channel_counts = vec![0u64; d];
    let mut jumps = Vec::new();

    for step in 0..n {
        for zk in z.iter_mut() {
            *zk = rng.sample(StandardNormal);
        }
        let mut jumped = false;
        for c in 0..d {
            jump[c] = 0.0;
            let u: f64 = rng.random();
            if means[c] > 0.0 {
                let k = poisson_by_inversion(u, means[c]);
                for _ in 0..k {
                    jump[c] += spec.jumps[c].draw(rng);
                }
                if k > 0 {
                    channel_counts[c] += k;
                    jumped = true;
                }
            }
        }
        for i in 0..d {
            let mut drift = 0.0;
            for j in 0..d {
                drift -= a[(i, j)] * (x[j] - spec.drift_level[j]);
            }
            let mut noise = 0.0;
            for (k, zk) in z.iter().enumerate() {
                noise += s[(i, k)] * zk;
            }
            next[i] = x[i] + drift * h + noise * sqrt_h + jump[i];
        }
        if jumped {
            jumps.push((step, jump.clone()));
        }
        std::mem::swap(&mut x, &mut next);
        data.extend_from_slice(&x);
    }
    Ok(LatentPath {
        dim: d,
        data,
        channel_counts,
        jumps,
    })
}

/// The true data-generating system.
#[derive(Clone, Debug)]
pub struct LatentSystemSpec {
    pub lambda1: DMatrix<f64>,
    pub lambda2: DMatrix<f64>,
    pub b0: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    pub xi: OUJumpSpec,
    pub delta: OUJumpSpec,
    pub eps: OUJumpSpec,
    pub zeta: OUJumpSpec,
}

impl LatentSystemSpec {
    pub fn p1(&self) -> usize {
        self.lambda1.nrows()
    }

    pub fn p2(&self) -> usize {
        self.lambda2.nrows()
    }

    pub fn without_jumps(&self) -> Self {
        LatentSystemSpec {
            xi: self.xi.without_jumps(),
            delta: self.delta.without_jumps(),
            eps: self.eps.without_jumps(),
            zeta: self.zeta.without_jumps(),
            ..self.clone()
        }
    }

    /// Expected number of jumps per unit time, summed over all channels.
    pub fn total_intensity(&self) -> f64 {
        [&self.xi, &self.delta, &self.eps, &self.zeta]
            .iter()
            .flat_map(|s| s.jumps.iter().map(JumpSize::intensity))
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        let (p1, k1) = self.lambda1.shape();
        let (p2, k2) = self.lambda2.shape();
        let dims_ok = self.b0.shape() == (k2, k2)
            && self.gamma.shape() == (k2, k1)
            && self.xi.dim() == k1
            && self.delta.dim() == p1
            && self.eps.dim() == p2
            && self.zeta.dim() == k2;
        if !dims_ok {
            return Err(Error::InvalidSpec(format!(
                "latent system dimensions incompatible: lambda1 {p1}x{k1}, lambda2 {p2}x{k2}, \
                 gamma {}x{}, b0 {}x{}, xi {}, delta {}, eps {}, zeta {}",
                self.gamma.nrows(),
                self.gamma.ncols(),
                self.b0.nrows(),
                self.b0.ncols(),
                self.xi.dim(),
                self.delta.dim(),
                self.eps.dim(),
                self.zeta.dim()
            )));
        }
        self.xi.validate("xi")?;
        self.delta.validate("delta")?;
        self.eps.validate("eps")?;
        self.zeta.validate("zeta")?;
        Ok(())
    }

    /// Maps latent values `(xi, delta, eps, zeta)` to `X`.
    fn observe(&self, psi_inv: &DMatrix<f64>, xi: &[f64], delta: &[f64], eps: &[f64], zeta: &[f64], out: &mut [f64]) {
        let (p1, k1) = self.lambda1.shape();
        let (p2, k2) = self.lambda2.shape();
        for i in 0..p1 {
            out[i] = delta[i] + (0..k1).map(|a| self.lambda1[(i, a)] * xi[a]).sum::<f64>();
        }
        let mut inner = vec![0.0; k2];
        for (b, slot) in inner.iter_mut().enumerate() {
            *slot = zeta[b] + (0..k1).map(|a| self.gamma[(b, a)] * xi[a]).sum::<f64>();
        }
        let mut eta = vec![0.0; k2];
        for (b, slot) in eta.iter_mut().enumerate() {
            *slot = (0..k2).map(|c| psi_inv[(b, c)] * inner[c]).sum();
        }
        for i in 0..p2 {
            out[p1 + i] = eps[i] + (0..k2).map(|b| self.lambda2[(i, b)] * eta[b]).sum::<f64>();
        }
    }
}

/// Ground truth about the jumps in one simulated panel.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct JumpLog {
    /// Total number of jumps over all channels.
    pub total_jumps: u64,
    /// Jumps per latent channel, in the order xi, delta, eps, zeta.
    pub channel_counts: Vec<u64>,
    /// Increments containing at least one jump, ascending.
    pub jump_steps: Vec<usize>,
    /// Euclidean norm of the jump displacement of `X` at each of `jump_steps`.
    pub jump_norms: Vec<f64>,
}

impl JumpLog {
    /// Jump steps whose `X`-space displacement exceeds `tau`.
    pub fn detectable(&self, tau: f64) -> usize {
        self.jump_norms.iter().filter(|&&v| v > tau).count()
    }
}

/// Observations `X_{t_0}, ..., X_{t_n}` on a uniform grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationSet {
    n: usize,
    h: f64,
    p1: usize,
    p2: usize,
    /// `(n + 1) x p`, row-major.
    data: Vec<f64>,
    seed: u64,
    jump_log: Option<JumpLog>,
}

impl ObservationSet {
    pub fn new(n: usize, h: f64, p1: usize, p2: usize, data: Vec<f64>) -> Result<Self> {
        check_grid(n, h)?;
        let p = p1 + p2;
        if data.len() != (n + 1) * p {
            return Err(Error::mismatch("observation values", (n + 1) * p, data.len()));
        }
        Ok(ObservationSet {
            n,
            h,
            p1,
            p2,
            data,
            seed: 0,
            jump_log: None,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn horizon(&self) -> f64 {
        self.n as f64 * self.h
    }

    pub fn p1(&self) -> usize {
        self.p1
    }

    pub fn p2(&self) -> usize {
        self.p2
    }

    pub fn p(&self) -> usize {
        self.p1 + self.p2
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn jump_log(&self) -> Option<&JumpLog> {
        self.jump_log.as_ref()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let p = self.p();
        &self.data[i * p..(i + 1) * p]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// `X_{t_{i+1}} - X_{t_i}` written into `out`.
    pub fn increment_into(&self, i: usize, out: &mut [f64]) {
        let p = self.p();
        let a = &self.data[i * p..(i + 1) * p];
        let b = &self.data[(i + 1) * p..(i + 2) * p];
        for k in 0..p {
            out[k] = b[k] - a[k];
        }
    }

    /// Every value multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        ObservationSet {
            data: self.data.iter().map(|v| v * c).collect(),
            ..self.clone()
        }
    }
}

/// Simulates one panel. The four latent processes use substreams keyed by
/// `(master_seed, tag, replication)`.
pub fn assemble_observations(sys: &LatentSystemSpec, n: usize, h: f64, master_seed: u64) -> Result<ObservationSet> {
    assemble_replication(sys, n, h, master_seed, 0)
}

pub fn assemble_replication(
    sys: &LatentSystemSpec,
    n: usize,
    h: f64,
    master_seed: u64,
    replication: u64,
) -> Result<ObservationSet> {
    check_grid(n, h)?;
    sys.validate()?;
    let psi = DMatrix::identity(sys.b0.nrows(), sys.b0.nrows()) - &sys.b0;
    let psi_inv = invert_psi(&psi)?;
    let sim = |spec: &OUJumpSpec, tag: ProcessTag| {
        simulate_latent(
            spec,
            n,
            h,
            &mut RandomStream::derive(master_seed, tag as u64, replication),
        )
    };
    let xi = sim(&sys.xi, ProcessTag::Xi)?;
    let delta = sim(&sys.delta, ProcessTag::Delta)?;
    let eps = sim(&sys.eps, ProcessTag::Eps)?;
    let zeta = sim(&sys.zeta, ProcessTag::Zeta)?;

    let (p1, p2) = (sys.p1(), sys.p2());
    let p = p1 + p2;
    let mut data = vec![0.0; (n + 1) * p];
    for (i, out) in data.chunks_exact_mut(p).enumerate() {
        sys.observe(&psi_inv, xi.row(i), delta.row(i), eps.row(i), zeta.row(i), out);
    }

    let jump_log = build_jump_log(sys, &psi_inv, [&xi, &delta, &eps, &zeta]);
    Ok(ObservationSet {
        n,
        h,
        p1,
        p2,
        data,
        seed: master_seed,
        jump_log: Some(jump_log),
    })
}

fn build_jump_log(sys: &LatentSystemSpec, psi_inv: &DMatrix<f64>, paths: [&LatentPath; 4]) -> JumpLog {
    let total_jumps = paths.iter().flat_map(|p| p.channel_counts.iter()).sum();
    let mut steps: Vec<usize> = paths.iter().flat_map(|p| p.jumps.iter().map(|(s, _)| *s)).collect();
    steps.sort_unstable();
    steps.dedup();

    let dims: Vec<usize> = paths.iter().map(|p| p.dim).collect();
    let mut cursors = [0usize; 4];
    let mut displacement: Vec<Vec<f64>> = dims.iter().map(|&d| vec![0.0; d]).collect();
    let mut out = vec![0.0; sys.p1() + sys.p2()];
    let mut norms = Vec::with_capacity(steps.len());
    for &step in &steps {
        for (k, path) in paths.iter().enumerate() {
            displacement[k].iter_mut().for_each(|v| *v = 0.0);
            if let Some((s, j)) = path.jumps.get(cursors[k]) {
                if *s == step {
                    displacement[k].copy_from_slice(j);
                    cursors[k] += 1;
                }
            }
        }
        // The observation map is linear, so it carries jumps to X directly.
        sys.observe(
            psi_inv,
            &displacement[0],
            &displacement[1],
            &displacement[2],
            &displacement[3],
            &mut out,
        );
        norms.push(out.iter().map(|v| v * v).sum::<f64>().sqrt());
    }
    JumpLog {
        total_jumps,
        channel_counts: paths.iter().flat_map(|p| p.channel_counts.iter().copied()).collect(),
        jump_steps: steps,
        jump_norms: norms,
    }
}

// ---------------------------------------------------------------------------
// CSV

pub fn write_observations(obs: &ObservationSet, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_observations_to(obs, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_observations_to(obs: &ObservationSet, w: &mut impl Write) -> std::io::Result<()> {
    writeln!(w, "# n={} h={} p1={} p2={}", obs.n, obs.h, obs.p1, obs.p2)?;
    let mut line = String::new();
    for i in 0..=obs.n {
        line.clear();
        for (k, v) in obs.row(i).iter().enumerate() {
            if k > 0 {
                line.push(',');
            }
            // Display for f64 is the shortest representation that round-trips.
            line.push_str(&v.to_string());
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn read_observations(path: &Path) -> Result<ObservationSet> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_observations_from(BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

struct Header {
    n: usize,
    h: f64,
    p1: usize,
    p2: usize,
}

fn parse_header(line: &str) -> Result<Header> {
    let bad = |message: String| Error::Parse { line: 1, message };
    let body = line
        .strip_prefix('#')
        .ok_or_else(|| bad("header must start with `# n=<int> h=<real> p1=<int> p2=<int>`".into()))?;
    let (mut n, mut h, mut p1, mut p2, mut horizon) = (None, None, None, None, None);
    for tok in body.split_whitespace() {
        let (key, value) = tok
            .split_once('=')
            .ok_or_else(|| bad(format!("header token `{tok}` is not key=value")))?;
        let int = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| bad(format!("`{key}` must be an integer")))
        };
        let real = |v: &str| v.parse::<f64>().map_err(|_| bad(format!("`{key}` must be a number")));
        match key {
            "n" => n = Some(int(value)?),
            "h" => h = Some(real(value)?),
            "p1" => p1 = Some(int(value)?),
            "p2" => p2 = Some(int(value)?),
            "T" => horizon = Some(real(value)?),
            _ => return Err(bad(format!("unknown header key `{key}`"))),
        }
    }
    let missing = |k: &str| bad(format!("header is missing `{k}`"));
    let header = Header {
        n: n.ok_or_else(|| missing("n"))?,
        h: h.ok_or_else(|| missing("h"))?,
        p1: p1.ok_or_else(|| missing("p1"))?,
        p2: p2.ok_or_else(|| missing("p2"))?,
    };
    if let Some(t) = horizon {
        let expected = header.n as f64 * header.h;
        if (t - expected).abs() > 1e-9 * expected.abs().max(1.0) {
            return Err(bad(format!("T = {t} does not equal n*h = {expected}")));
        }
    }
    Ok(header)
}

pub fn read_observations_from(reader: impl BufRead) -> Result<ObservationSet> {
    let mut lines = reader.lines();
    let first = lines
        .next()
        .ok_or(Error::Parse {
            line: 1,
            message: "empty file".into(),
        })?
        .map_err(|e| Error::io("<reader>", e))?;
    let header = parse_header(first.trim())?;
    let p = header.p1 + header.p2;
    let mut data = Vec::with_capacity((header.n + 1) * p);
    let mut rows = 0usize;
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line.map_err(|e| Error::io("<reader>", e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let before = data.len();
        for field in line.split(',') {
            let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("`{}` is not a number", field.trim()),
            })?;
            data.push(v);
        }
        let found = data.len() - before;
        if found != p {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected {p} columns, found {found}"),
            });
        }
        rows += 1;
    }
    if rows != header.n + 1 {
        return Err(Error::Parse {
            line: rows + 1,
            message: format!("expected {} rows for n = {}, found {rows}", header.n + 1, header.n),
        });
    }
    ObservationSet::new(header.n, header.h, header.p1, header.p2, data)
}
