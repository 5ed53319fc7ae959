use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::data::{resize_view, PatchDataset};
use crate::error::{invalid, Error, Result};
use crate::evidential::opinion_from_evidence;
use crate::model::{views_to_input, HeadKind, Model};

const EMBED_BLOCK: usize = 256;

/// Encoder embeddings (row-major N x dim) and, for evidential models, the
/// per-item uncertainty.
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    pub dim: usize,
    pub values: Vec<f64>,
    pub uncertainty: Option<Vec<f64>>,
}

pub fn embed_dataset(model: &Model, ds: &PatchDataset) -> Result<Embeddings> {
    let side = model.arch.encoder.input_side;
    let evidential = model.arch.head == HeadKind::Evidential;
    let mut values = Vec::with_capacity(ds.len() * model.embedding_dim());
    let mut unc = Vec::new();
    for block in ds.items().chunks(EMBED_BLOCK) {
        let views: Vec<_> = block.iter().map(|it| resize_view(&it.image, side)).collect();
        let x = views_to_input(&views);
        values.extend(model.embed(&x)?.into_iter().map(f64::from));
        if evidential {
            let k = model.output_dim();
            for e in model.forward(&x)?.chunks(k) {
                let e: Vec<f64> = e.iter().map(|&v| f64::from(v)).collect();
                unc.push(opinion_from_evidence(&e)?.uncertainty);
            }
        }
    }
    Ok(Embeddings {
        dim: model.embedding_dim(),
        values,
        uncertainty: evidential.then_some(unc),
    })
}

/// Top-two principal directions of a point cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit-length directions, largest variance first.
    pub components: [Vec<f64>; 2],
    pub variances: [f64; 2],
    /// Coordinates of every row along the two components.
    pub projections: Vec<[f64; 2]>,
}

impl Pca {
    /// Sum of squared distances between the rows and their rank-2
    /// reconstructions.
    pub fn reconstruction_error(&self, data: &[f64]) -> f64 {
        let d = self.mean.len();
        data.chunks(d)
            .zip(&self.projections)
            .map(|(row, p)| {
                (0..d)
                    .map(|j| {
                        let rec = self.mean[j] + p[0] * self.components[0][j] + p[1] * self.components[1][j];
                        (row[j] - rec).powi(2)
                    })
                    .sum::<f64>()
            })
            .sum()
    }
}

/// PCA by eigendecomposition of the sample covariance. Component signs are
/// fixed so that each component's largest-magnitude entry is positive.
pub fn pca_2d(data: &[f64], dim: usize) -> Result<Pca> {
    if dim < 2 || data.len() % dim != 0 || data.len() < 2 * dim {
        return Err(invalid!("PCA needs at least two rows of at least two columns"));
    }
    let n = data.len() / dim;
    let mut mean = vec![0.0; dim];
    for row in data.chunks(dim) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n as f64;
        }
    }
    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    for row in data.chunks(dim) {
        for a in 0..dim {
            let da = row[a] - mean[a];
            for b in a..dim {
                cov[(a, b)] += da * (row[b] - mean[b]);
            }
        }
    }
    for a in 0..dim {
        for b in a..dim {
            let v = cov[(a, b)] / (n - 1) as f64;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let component = |k: usize| {
        let mut v: Vec<f64> = eig.eigenvectors.column(order[k]).iter().copied().collect();
        let big = v.iter().copied().fold(0.0, |acc: f64, x| if x.abs() > acc.abs() { x } else { acc });
        if big < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        v
    };
    let components = [component(0), component(1)];
    let projections = data
        .chunks(dim)
        .map(|row| {
            let c = |k: usize| (0..dim).map(|j| (row[j] - mean[j]) * components[k][j]).sum::<f64>();
            [c(0), c(1)]
        })
        .collect();
    Ok(Pca {
        mean,
        variances: [eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]],
        components,
        projections,
    })
}

/// Writes a TSV with columns `id`, `label`, `uncertainty` (blank unless the
/// model is evidential), `e0..e{D-1}` and optionally `pc1`, `pc2`.
pub fn export_embeddings(model: &Model, ds: &PatchDataset, mut out: impl Write, with_pca: bool) -> Result<()> {
    let emb = embed_dataset(model, ds)?;
    let pca = if with_pca { Some(pca_2d(&emb.values, emb.dim)?) } else { None };
    let mut header = vec!["id".to_string(), "label".into(), "uncertainty".into()];
    header.extend((0..emb.dim).map(|j| format!("e{j}")));
    if pca.is_some() {
        header.extend(["pc1".to_string(), "pc2".into()]);
    }
    let io = |e| Error::io(Path::new("<embeddings>"), e);
    writeln!(out, "{}", header.join("\t")).map_err(io)?;
    for (i, item) in ds.items().iter().enumerate() {
        let mut cols = vec![
            item.id.clone(),
            item.label.map(|l| l.to_string()).unwrap_or_default(),
            emb.uncertainty.as_ref().map(|u| u[i].to_string()).unwrap_or_default(),
        ];
        cols.extend(emb.values[i * emb.dim..(i + 1) * emb.dim].iter().map(|v| v.to_string()));
        if let Some(p) = &pca {
            cols.extend(p.projections[i].iter().map(|v| v.to_string()));
        }
        writeln!(out, "{}", cols.join("\t")).map_err(io)?;
    }
    Ok(())
}

pub fn save_embeddings(model: &Model, ds: &PatchDataset, path: &Path, with_pca: bool) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    export_embeddings(model, ds, &mut w, with_pca)?;
    w.flush().map_err(|e| Error::io(path, e))
}
