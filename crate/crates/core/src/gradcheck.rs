//! Central finite-difference verification of every analytic gradient in the
//! crate: distances, neighbour probabilities, both d-SNE loss modes, embedding
//! normalisation, cross-entropy, consistency, each network parameter tensor,
//! and the complete supervised objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Domain, Image, Sample};
use crate::error::{Error, Result};
use crate::loss::{
    hausdorff_loss, l2_normalize_rows, l2_normalize_rows_backward, likelihood_loss,
    pairwise_sq_dist, pairwise_sq_dist_backward, sne_probabilities, sne_probabilities_backward,
    DistanceMatrix,
};
use crate::mean_teacher::consistency_loss;
use crate::net::{self, Arch, Batch, ConvSpec, InputShape, ModelParams};
use crate::tensor::Matrix;
use crate::trainer::{cross_entropy, pair_objective, pair_objective_value, Networks, TrainConfig};

pub const PERTURBATION: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Minimum gap kept between competing distances and from the hinge when
/// drawing Hausdorff check points.
const TIE_GAP: f64 = 1e-2;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GradcheckOptions {
    pub seed: u64,
    /// Component whose analytic gradient is deliberately corrupted.
    pub inject_fault: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentReport {
    pub component: String,
    pub worst_rel_error: f64,
    pub checks: usize,
}

impl ComponentReport {
    pub fn passed(&self) -> bool {
        self.worst_rel_error < TOLERANCE
    }
}

/// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)`; zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Central differences of `f` at `x`.
pub fn central_differences(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            probe[k] = x[k] + h;
            let up = f(&probe);
            probe[k] = x[k] - h;
            let down = f(&probe);
            probe[k] = x[k];
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| scale * (rng.random::<f64>() * 2.0 - 1.0)).collect())
        .expect("sized")
}

fn labels(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}

/// Labels where every class in `0..classes` appears at least once.
fn covering_labels(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<usize> {
    let mut l: Vec<usize> = (0..n).map(|i| i % classes).collect();
    for i in (1..n).rev() {
        l.swap(i, rng.random_range(0..=i));
    }
    l
}

fn split(x: &[f64], at: usize, rows_a: usize, rows_b: usize, d: usize) -> (Matrix, Matrix) {
    (
        Matrix::from_vec(rows_a, d, x[..at].to_vec()).expect("sized"),
        Matrix::from_vec(rows_b, d, x[at..].to_vec()).expect("sized"),
    )
}

fn concat(a: &Matrix, b: &Matrix) -> Vec<f64> {
    a.as_slice().iter().chain(b.as_slice()).copied().collect()
}

/// True when every kept row's arg-max/arg-min is separated from its runner-up
/// and the hinge is away from its kink.
pub fn hausdorff_tie_free(d: &DistanceMatrix, margin: f64, gap: f64) -> bool {
    (0..d.values.rows()).all(|j| {
        let row = d.values.row(j);
        let mut same: Vec<f64> = Vec::new();
        let mut diff: Vec<f64> = Vec::new();
        for (i, &v) in row.iter().enumerate() {
            if d.labels_s[i] == d.labels_t[j] {
                same.push(v);
            } else {
                diff.push(v);
            }
        }
        if same.is_empty() || diff.is_empty() {
            return true;
        }
        same.sort_by(|a, b| b.total_cmp(a));
        diff.sort_by(|a, b| a.total_cmp(b));
        let separated = |s: &[f64]| s.len() < 2 || (s[0] - s[1]).abs() > gap;
        separated(&same) && separated(&diff) && (same[0] - diff[0] + margin).abs() > gap
    })
}

struct Suite {
    rng: ChaCha8Rng,
    fault: Option<String>,
    reports: Vec<ComponentReport>,
}

impl Suite {
    fn record(&mut self, component: &str, mut analytic: Vec<f64>, numeric: &[f64]) {
        if self.fault.as_deref() == Some(component) {
            if let Some(v) = analytic.iter_mut().max_by(|a, b| a.abs().total_cmp(&b.abs())) {
                *v = *v * 1.05 + 1e-3;
            }
        }
        let err = relative_error(&analytic, numeric);
        match self.reports.iter_mut().find(|r| r.component == component) {
            Some(r) => {
                r.worst_rel_error = r.worst_rel_error.max(err);
                r.checks += 1;
            }
            None => self.reports.push(ComponentReport {
                component: component.to_string(),
                worst_rel_error: err,
                checks: 1,
            }),
        }
    }

    fn pairwise(&mut self) -> Result<()> {
        for _ in 0..3 {
            let (bt, bs, d) = (3, 4, 3);
            let et = random_matrix(&mut self.rng, bt, d, 1.0);
            let es = random_matrix(&mut self.rng, bs, d, 1.0);
            let w = random_matrix(&mut self.rng, bt, bs, 1.0);
            let (gt, gs) = pairwise_sq_dist_backward(&et, &es, &w);
            let x = concat(&et, &es);
            let numeric = central_differences(&x, PERTURBATION, |x| {
                let (t, s) = split(x, bt * d, bt, bs, d);
                let dm = pairwise_sq_dist(&t, &s).expect("dims");
                dm.as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum()
            });
            self.record("pairwise_sq_dist", concat(&gt, &gs), &numeric);
        }
        Ok(())
    }

    fn probabilities(&mut self) -> Result<()> {
        for _ in 0..3 {
            let dm = random_matrix(&mut self.rng, 3, 5, 2.0);
            let dm = Matrix::from_vec(3, 5, dm.as_slice().iter().map(|v| v.abs()).collect())?;
            let w = random_matrix(&mut self.rng, 3, 5, 1.0);
            let p = sne_probabilities(&dm)?;
            let analytic = sne_probabilities_backward(&p, &w);
            let numeric = central_differences(dm.as_slice(), PERTURBATION, |x| {
                let m = Matrix::from_vec(3, 5, x.to_vec()).expect("sized");
                let p = sne_probabilities(&m).expect("finite");
                p.as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum()
            });
            self.record("sne_probabilities", analytic.into_vec(), &numeric);
        }
        Ok(())
    }

    fn likelihood(&mut self) -> Result<()> {
        let (bt, bs, d) = (4, 6, 3);
        for _ in 0..3 {
            let et = random_matrix(&mut self.rng, bt, d, 1.0);
            let es = random_matrix(&mut self.rng, bs, d, 1.0);
            let lt = labels(&mut self.rng, bt, 3);
            let ls = covering_labels(&mut self.rng, bs, 3);
            let value = |t: &Matrix, s: &Matrix| {
                likelihood_loss(&DistanceMatrix::from_embeddings(t, &lt, s, &ls).expect("dims"))
            };
            let r = value(&et, &es)?;
            let (gt, gs) = pairwise_sq_dist_backward(&et, &es, &r.grad_distances);
            let numeric = central_differences(&concat(&et, &es), PERTURBATION, |x| {
                let (t, s) = split(x, bt * d, bt, bs, d);
                value(&t, &s).expect("non-degenerate").loss
            });
            self.record("likelihood_loss", concat(&gt, &gs), &numeric);
        }
        Ok(())
    }

    fn hausdorff(&mut self) -> Result<()> {
        let (bt, bs, d, margin) = (4, 6, 3, 1.0);
        let mut done = 0;
        while done < 3 {
            let et = random_matrix(&mut self.rng, bt, d, 1.0);
            let es = random_matrix(&mut self.rng, bs, d, 1.0);
            let lt = labels(&mut self.rng, bt, 3);
            let ls = covering_labels(&mut self.rng, bs, 3);
            let dm = DistanceMatrix::from_embeddings(&et, &lt, &es, &ls)?;
            if !hausdorff_tie_free(&dm, margin, TIE_GAP) {
                continue;
            }
            let r = hausdorff_loss(&dm, margin)?;
            let (gt, gs) = pairwise_sq_dist_backward(&et, &es, &r.grad_distances);
            let numeric = central_differences(&concat(&et, &es), PERTURBATION, |x| {
                let (t, s) = split(x, bt * d, bt, bs, d);
                let dm = DistanceMatrix::from_embeddings(&t, &lt, &s, &ls).expect("dims");
                hausdorff_loss(&dm, margin).expect("non-degenerate").loss
            });
            self.record("hausdorff_loss", concat(&gt, &gs), &numeric);
            done += 1;
        }
        Ok(())
    }

    fn normalize(&mut self) -> Result<()> {
        for _ in 0..3 {
            let e = random_matrix(&mut self.rng, 3, 4, 1.0);
            let w = random_matrix(&mut self.rng, 3, 4, 1.0);
            let (u, norms) = l2_normalize_rows(&e);
            let analytic = l2_normalize_rows_backward(&u, &norms, &w);
            let numeric = central_differences(e.as_slice(), PERTURBATION, |x| {
                let (u, _) = l2_normalize_rows(&Matrix::from_vec(3, 4, x.to_vec()).expect("sized"));
                u.as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum()
            });
            self.record("l2_normalize", analytic.into_vec(), &numeric);
        }
        Ok(())
    }

    fn cross_entropy(&mut self) -> Result<()> {
        for _ in 0..3 {
            let logits = random_matrix(&mut self.rng, 5, 4, 3.0);
            let y = labels(&mut self.rng, 5, 4);
            let (_, g) = cross_entropy(&logits, &y)?;
            let numeric = central_differences(logits.as_slice(), PERTURBATION, |x| {
                cross_entropy(&Matrix::from_vec(5, 4, x.to_vec()).expect("sized"), &y)
                    .expect("labels")
                    .0
            });
            self.record("cross_entropy", g.into_vec(), &numeric);
        }
        Ok(())
    }

    fn consistency(&mut self) -> Result<()> {
        for _ in 0..3 {
            let s = random_matrix(&mut self.rng, 4, 3, 1.0);
            let t = random_matrix(&mut self.rng, 4, 3, 1.0);
            let (_, g) = consistency_loss(&s, &t)?;
            let numeric = central_differences(s.as_slice(), PERTURBATION, |x| {
                consistency_loss(&Matrix::from_vec(4, 3, x.to_vec()).expect("sized"), &t)
                    .expect("shapes")
                    .0
            });
            self.record("consistency_loss", g.into_vec(), &numeric);
        }
        Ok(())
    }

    /// Each parameter tensor of a small conv net under random cotangents.
    fn network(&mut self) -> Result<()> {
        let arch = Arch {
            input: InputShape {
                height: 8,
                width: 8,
                channels: 2,
            },
            conv: vec![ConvSpec {
                channels: 3,
                kernel: 3,
            }],
            hidden: vec![6],
            embedding_dim: 4,
            class_count: 3,
        };
        let params = net::init_params(self.rng.random(), &arch)?;
        let n = 3;
        let batch = Batch::new(
            arch.input,
            (0..n * arch.input.len()).map(|_| self.rng.random::<f64>()).collect(),
        )?;
        let ge = random_matrix(&mut self.rng, n, arch.embedding_dim, 1.0);
        let gl = random_matrix(&mut self.rng, n, arch.class_count, 1.0);
        let fr = net::forward(&params, &batch)?;
        let grads = net::backward(&params, &fr, &ge, &gl)?;
        let scalar = |p: &ModelParams| {
            let r = net::infer(p, &batch).expect("forward");
            r.embeddings.as_slice().iter().zip(ge.as_slice()).map(|(a, b)| a * b).sum::<f64>()
                + r.logits.as_slice().iter().zip(gl.as_slice()).map(|(a, b)| a * b).sum::<f64>()
        };
        for (ti, tensor) in params.tensors().iter().enumerate() {
            let numeric = central_differences(&tensor.data, PERTURBATION, |x| {
                let mut p = params.clone();
                p.values_mut().nth(ti).expect("tensor").copy_from_slice(x);
                scalar(&p)
            });
            self.record(&format!("diffnet/{}", tensor.name), grads.0[ti].clone(), &numeric);
        }
        Ok(())
    }

    /// Full objective on a 2-class, 8-sample problem with a 2-layer network.
    fn end_to_end(&mut self) -> Result<()> {
        let cfg = TrainConfig {
            alpha: 0.3,
            beta: 0.7,
            margin: 1.0,
            arch: Arch {
                input: InputShape {
                    height: 1,
                    width: 4,
                    channels: 1,
                },
                conv: vec![],
                hidden: vec![6],
                embedding_dim: 3,
                class_count: 2,
            },
            ..Default::default()
        };
        loop {
            let nets = Networks {
                source: net::init_params(self.rng.random(), &cfg.arch)?,
                target: None,
            };
            let sample = |label: usize, domain: Domain, rng: &mut ChaCha8Rng| Sample {
                image: Image::new(1, 4, 1, (0..4).map(|_| rng.random::<f32>()).collect()).expect("unit"),
                label,
                domain,
            };
            let source: Vec<Sample> = [0, 1, 0, 1].iter().map(|&l| sample(l, Domain::Source, &mut self.rng)).collect();
            let target: Vec<Sample> = [0, 1, 1, 0].iter().map(|&l| sample(l, Domain::Target, &mut self.rng)).collect();
            let (sr, tr): (Vec<&Sample>, Vec<&Sample>) = (source.iter().collect(), target.iter().collect());

            let es = net::infer(&nets.source, &Batch::from_images(sr.iter().map(|s| &s.image))?)?;
            let et = net::infer(&nets.source, &Batch::from_images(tr.iter().map(|s| &s.image))?)?;
            let dm = DistanceMatrix::from_embeddings(&et.embeddings, &[0, 1, 1, 0], &es.embeddings, &[0, 1, 0, 1])?;
            if !hausdorff_tie_free(&dm, cfg.margin, TIE_GAP) {
                continue;
            }
            let out = pair_objective(&cfg, &nets, &sr, &tr)?;
            let mut g = out.grads.source;
            g.add_assign(&out.grads.target);
            let flat: Vec<f64> = nets.source.values().flatten().copied().collect();
            let numeric = central_differences(&flat, PERTURBATION, |x| {
                let mut p = nets.source.clone();
                let mut at = 0;
                for t in p.values_mut() {
                    t.copy_from_slice(&x[at..at + t.len()]);
                    at += t.len();
                }
                let n = Networks { source: p, target: None };
                pair_objective_value(&cfg, &n, &sr, &tr).expect("objective").total
            });
            self.record("objective", g.flatten(), &numeric);
            return Ok(());
        }
    }
}

/// Runs every component check and returns one report per component.
pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<Vec<ComponentReport>> {
    let mut suite = Suite {
        rng: ChaCha8Rng::seed_from_u64(opts.seed),
        fault: opts.inject_fault.clone(),
        reports: Vec::new(),
    };
    suite.pairwise()?;
    suite.probabilities()?;
    suite.likelihood()?;
    suite.hausdorff()?;
    suite.normalize()?;
    suite.cross_entropy()?;
    suite.consistency()?;
    suite.network()?;
    suite.end_to_end()?;
    if let Some(f) = &opts.inject_fault {
        if !suite.reports.iter().any(|r| &r.component == f) {
            return Err(Error::Config(format!("no gradient-check component named {f:?}")));
        }
    }
    Ok(suite.reports)
}
