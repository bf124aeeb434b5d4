use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, Dataset, DatasetSchema, Journey};

/// Padded, row-major view of a group of journeys. Position `(b, t)` lives at `b * t_max + t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub t_max: usize,
    pub d_f: usize,
    /// Channel ids; padding holds the sentinel `K`.
    pub channels: Vec<usize>,
    /// `size * t_max * d_f`, zero at padding.
    pub features: Vec<f64>,
    pub mask: Vec<bool>,
    pub lengths: Vec<usize>,
    /// `size * n_cat`.
    pub user_cat: Vec<usize>,
    /// `size * n_num`.
    pub user_num: Vec<f64>,
    pub labels: Vec<f64>,
    /// Position of each row in the source dataset (or input slice).
    pub indices: Vec<usize>,
}

impl Batch {
    /// Journeys may be empty here (coalition scoring); an all-empty batch still gets `t_max = 1`.
    pub fn from_journeys<'a, I>(schema: &DatasetSchema, journeys: I) -> Batch
    where
        I: IntoIterator<Item = (usize, &'a Journey)>,
    {
        let rows: Vec<(usize, &Journey)> = journeys.into_iter().collect();
        let size = rows.len();
        let t_max = rows.iter().map(|(_, j)| j.len()).max().unwrap_or(0).max(1);
        let d_f = schema.n_touch_features;
        let mut b = Batch {
            size,
            t_max,
            d_f,
            channels: vec![schema.n_channels; size * t_max],
            features: vec![0.0; size * t_max * d_f],
            mask: vec![false; size * t_max],
            lengths: Vec::with_capacity(size),
            user_cat: Vec::with_capacity(size * schema.cat_cardinalities.len()),
            user_num: Vec::with_capacity(size * schema.n_user_numeric),
            labels: Vec::with_capacity(size),
            indices: Vec::with_capacity(size),
        };
        for (row, (idx, j)) in rows.into_iter().enumerate() {
            for (t, tp) in j.touchpoints.iter().enumerate() {
                let p = row * t_max + t;
                b.channels[p] = tp.channel;
                b.mask[p] = true;
                b.features[p * d_f..(p + 1) * d_f].copy_from_slice(&tp.features);
            }
            b.lengths.push(j.len());
            b.user_cat.extend_from_slice(&j.user_cat);
            b.user_num.extend_from_slice(&j.user_num);
            b.labels.push(j.label());
            b.indices.push(idx);
        }
        b
    }

    pub fn n_valid(&self) -> usize {
        self.lengths.iter().sum()
    }
}

/// Splits the dataset into padded batches; the last one may be partial.
/// `None` keeps dataset order.
pub fn make_batches(dataset: &Dataset, batch_size: usize, shuffle_seed: Option<u64>) -> Vec<Batch> {
    let batch_size = batch_size.max(1);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let js = dataset.journeys();
    order
        .chunks(batch_size)
        .map(|chunk| Batch::from_journeys(dataset.schema(), chunk.iter().map(|&i| (i, &js[i]))))
        .collect()
}

/// Largest-remainder rounding of `total * ratios`; the parts sum to `total`.
fn apportion(total: usize, ratios: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = ratios.iter().map(|r| r * total as f64).collect();
    let mut out: Vec<usize> = raw.iter().map(|x| x.floor() as usize).collect();
    let mut left = total - out.iter().sum::<usize>().min(total);
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        out[i] += 1;
        left -= 1;
    }
    out
}

/// Stratified train/val/test index sets, each sorted ascending.
pub fn split_indices(dataset: &Dataset, ratios: [f64; 3], seed: u64) -> Result<[Vec<usize>; 3], DataError> {
    if ratios.iter().any(|r| !(*r > 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DataError::Invalid(format!("split ratios must be positive and sum to 1, got {ratios:?}")));
    }
    let sizes = apportion(dataset.len(), &ratios);
    let mut pos: Vec<usize> = Vec::new();
    let mut neg: Vec<usize> = Vec::new();
    for (i, j) in dataset.journeys().iter().enumerate() {
        if j.converted { pos.push(i) } else { neg.push(i) }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    // Positives are spread by the split ratios; negatives fill the rest of each split.
    let mut pos_sizes = apportion(pos.len(), &ratios);
    for k in 0..3 {
        while pos_sizes[k] > sizes[k] {
            pos_sizes[k] -= 1;
            let j = (0..3).find(|&j| pos_sizes[j] < sizes[j]).expect("sizes cover all positives");
            pos_sizes[j] += 1;
        }
    }
    let (mut p, mut n) = (pos.into_iter(), neg.into_iter());
    let mut out: [Vec<usize>; 3] = Default::default();
    for k in 0..3 {
        out[k].extend(p.by_ref().take(pos_sizes[k]));
        out[k].extend(n.by_ref().take(sizes[k] - pos_sizes[k]));
        out[k].sort_unstable();
        if out[k].is_empty() {
            let name = ["train", "validation", "test"][k];
            return Err(DataError::Empty(format!("{name} split of {} journeys", dataset.len())));
        }
    }
    Ok(out)
}

pub fn split(dataset: &Dataset, ratios: [f64; 3], seed: u64) -> Result<(Dataset, Dataset, Dataset), DataError> {
    let [a, b, c] = split_indices(dataset, ratios, seed)?;
    Ok((dataset.select(&a), dataset.select(&b), dataset.select(&c)))
}
