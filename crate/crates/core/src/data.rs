//! Dataset construction: synthetic Gaussian blobs, IDX image files,
//! pathological/IID client partitioning, and backdoor-trigger poisoning.

use crate::error::{Error, Result};
use crate::nn::Batch;
use crate::{cast, Float};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::path::Path;

/// A full dataset before partitioning.
#[derive(Debug, Clone)]
pub struct Dataset<F> {
    pub train: Batch<F>,
    pub test: Batch<F>,
    pub n_classes: usize,
    /// `(rows, cols)` when the features are a raster image; `None` for
    /// unstructured feature vectors.
    pub image_shape: Option<(usize, usize)>,
}

/// One client's shard.
#[derive(Debug, Clone)]
pub struct ClientDataset<F> {
    pub client_id: usize,
    pub train: Batch<F>,
    pub test: Batch<F>,
    /// Marks the training rows carrying the trigger.
    pub poisoned_mask: Vec<bool>,
}

/// How the training data is spread across clients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionScheme {
    /// Uniformly shuffled, near-equal shards.
    Iid,
    /// Pathological label skew: each client holds `ceil(percent% * C)`
    /// distinct classes. Supported percentages: 10, 20, 50. `Pat(10)`
    /// additionally requires one client per class.
    Pat(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PartitionSpec {
    pub scheme: PartitionScheme,
    pub clients: usize,
}

/// Corner of the image that receives the trigger patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Corner {
    BottomRight,
    BottomLeft,
    TopRight,
    TopLeft,
}

/// Backdoor trigger: a square patch of constant intensity stamped onto
/// an image corner, with the label rotated by a fixed shift.
#[derive(Debug, Clone, Copy)]
pub struct TriggerSpec {
    pub patch_size: usize,
    pub patch_value: f64,
    pub corner: Corner,
    pub label_shift: usize,
}

impl Default for TriggerSpec {
    fn default() -> Self {
        Self { patch_size: 3, patch_value: 1.0, corner: Corner::BottomRight, label_shift: 5 }
    }
}

impl TriggerSpec {
    /// Checks the trigger against a concrete dataset geometry.
    pub fn validate(&self, n_classes: usize, dim: usize, image_shape: Option<(usize, usize)>) -> Result<()> {
        if self.patch_size == 0 {
            return Err(Error::Config("trigger patch_size must be at least 1".into()));
        }
        if self.label_shift == 0 || self.label_shift >= n_classes {
            return Err(Error::Config(format!(
                "trigger label_shift {} must lie in [1, {n_classes})",
                self.label_shift
            )));
        }
        match image_shape {
            Some((r, c)) => {
                if self.patch_size > r.min(c) {
                    return Err(Error::Config(format!(
                        "trigger patch {}x{0} does not fit a {r}x{c} image",
                        self.patch_size
                    )));
                }
            }
            None => {
                if self.patch_size * self.patch_size > dim {
                    return Err(Error::Config(format!(
                        "trigger patch needs {} coordinates, features have {dim}",
                        self.patch_size * self.patch_size
                    )));
                }
            }
        }
        Ok(())
    }

    /// Flat feature indices covered by the patch. Images place the patch
    /// in the configured corner; unstructured features use the trailing
    /// `patch_size^2` coordinates.
    pub fn coords(&self, dim: usize, image_shape: Option<(usize, usize)>) -> Vec<usize> {
        let p = self.patch_size;
        match image_shape {
            Some((r, c)) => {
                let (r0, c0) = match self.corner {
                    Corner::BottomRight => (r - p, c - p),
                    Corner::BottomLeft => (r - p, 0),
                    Corner::TopRight => (0, c - p),
                    Corner::TopLeft => (0, 0),
                };
                let mut out = Vec::with_capacity(p * p);
                for i in r0..r0 + p {
                    for j in c0..c0 + p {
                        out.push(i * c + j);
                    }
                }
                out
            }
            None => (dim - p * p..dim).collect(),
        }
    }
}

/// Samples `per_class` points per class from isotropic Gaussians with
/// deviation `spread` around one-hot unit centers (class `c` centered
/// at `e_c`), and splits each class 80/20 into train/test. Features are
/// treated as a square image when `dim` is a perfect square.
pub fn generate_blobs<F: Float>(
    n_classes: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Dataset<F>> {
    if n_classes < 2 {
        return Err(Error::Config("blob generation needs at least two classes".into()));
    }
    if n_classes > dim {
        return Err(Error::Config(format!(
            "blob centers are one-hot: {n_classes} classes need dim >= {n_classes}, got {dim}"
        )));
    }
    if per_class < 5 {
        return Err(Error::Config("blob generation needs at least 5 samples per class".into()));
    }
    if spread < 0.0 || !spread.is_finite() {
        return Err(Error::Config(format!("blob spread must be finite and non-negative, got {spread}")));
    }
    let train_per_class = per_class * 8 / 10;
    let mut train = Batch::empty(dim);
    let mut test = Batch::empty(dim);
    let mut row = vec![F::zero(); dim];
    for class in 0..n_classes {
        for s in 0..per_class {
            for (j, v) in row.iter_mut().enumerate() {
                let center = if j == class { 1.0 } else { 0.0 };
                let z: f64 = rng.sample(StandardNormal);
                *v = cast(center + spread * z);
            }
            if s < train_per_class {
                train.push_row(&row, class);
            } else {
                test.push_row(&row, class);
            }
        }
    }
    let side = dim.isqrt();
    let image_shape = (side * side == dim).then_some((side, side));
    Ok(Dataset { train, test, n_classes, image_shape })
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_be_bytes(bytes[offset..offset + 4].try_into().unwrap())
}

/// Reads a big-endian IDX image/label file pair into a batch (pixels
/// scaled to `[0, 1]` by 1/255) plus the image geometry.
pub fn load_idx<F: Float>(
    images_path: &Path,
    labels_path: &Path,
) -> Result<(Batch<F>, (usize, usize))> {
    let img = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let lab = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;

    if img.len() < 16 {
        return Err(Error::Ingestion(format!(
            "images header: file holds {} bytes, a 16-byte header is required",
            img.len()
        )));
    }
    let magic = be_u32(&img, 0);
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Ingestion(format!(
            "images magic: expected {IDX_IMAGES_MAGIC:#010x}, got {magic:#010x}"
        )));
    }
    let n_images = be_u32(&img, 4) as usize;
    let rows = be_u32(&img, 8) as usize;
    let cols = be_u32(&img, 12) as usize;
    let expected = n_images
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::Ingestion("images header: size overflow".into()))?;
    if img.len() - 16 != expected {
        return Err(Error::Ingestion(format!(
            "images payload: header promises {expected} pixels, file holds {}",
            img.len() - 16
        )));
    }

    if lab.len() < 8 {
        return Err(Error::Ingestion(format!(
            "labels header: file holds {} bytes, an 8-byte header is required",
            lab.len()
        )));
    }
    let magic = be_u32(&lab, 0);
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Ingestion(format!(
            "labels magic: expected {IDX_LABELS_MAGIC:#010x}, got {magic:#010x}"
        )));
    }
    let n_labels = be_u32(&lab, 4) as usize;
    if lab.len() - 8 != n_labels {
        return Err(Error::Ingestion(format!(
            "labels payload: header promises {n_labels} labels, file holds {}",
            lab.len() - 8
        )));
    }
    if n_images != n_labels {
        return Err(Error::Ingestion(format!(
            "item count: {n_images} images vs {n_labels} labels"
        )));
    }

    let features = img[16..]
        .iter()
        .map(|&b| cast::<F>(b as f64 / 255.0))
        .collect();
    let labels = lab[8..].iter().map(|&b| b as usize).collect();
    let batch = Batch::new(features, n_images, rows * cols, labels)?;
    Ok((batch, (rows, cols)))
}

/// Combines IDX train/test pairs into a dataset. The class count is the
/// largest label plus one.
pub fn dataset_from_idx<F: Float>(
    train: (Batch<F>, (usize, usize)),
    test: (Batch<F>, (usize, usize)),
) -> Result<Dataset<F>> {
    let (train, train_shape) = train;
    let (test, test_shape) = test;
    if train_shape != test_shape {
        return Err(Error::Ingestion(format!(
            "image shape: train images are {}x{}, test images are {}x{}",
            train_shape.0, train_shape.1, test_shape.0, test_shape.1
        )));
    }
    let max_label = train
        .labels()
        .iter()
        .chain(test.labels())
        .copied()
        .max()
        .ok_or_else(|| Error::Ingestion("item count: dataset holds no samples".into()))?;
    let n_classes = max_label + 1;
    if n_classes < 2 {
        return Err(Error::Ingestion("labels: a single class cannot be classified".into()));
    }
    Ok(Dataset { train, test, n_classes, image_shape: Some(train_shape) })
}

fn split_even_shuffled(n: usize, parts: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let base = n / parts;
    let rem = n % parts;
    let mut out = Vec::with_capacity(parts);
    let mut cursor = 0;
    for p in 0..parts {
        let take = base + usize::from(p < rem);
        out.push(idx[cursor..cursor + take].to_vec());
        cursor += take;
    }
    out
}

fn indices_by_class<F: Float>(batch: &Batch<F>, n_classes: usize) -> Result<Vec<Vec<usize>>> {
    let mut by_class = vec![Vec::new(); n_classes];
    for (i, &y) in batch.labels().iter().enumerate() {
        if y >= n_classes {
            return Err(Error::Ingestion(format!(
                "labels: label {y} out of range for {n_classes} classes"
            )));
        }
        by_class[y].push(i);
    }
    Ok(by_class)
}

/// Deals each client `per_client` distinct classes such that every class
/// appears on exactly `copies` clients. Clients draw in turn from the
/// classes with the most copies left (random tie-break), which keeps
/// every remaining count at or below the number of clients still to be
/// served, so the deal never gets stuck.
fn assign_classes(
    clients: usize,
    n_classes: usize,
    per_client: usize,
    copies: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<usize>>> {
    let mut counts = vec![copies; n_classes];
    let mut hands = Vec::with_capacity(clients);
    let mut ranked: Vec<usize> = (0..n_classes).collect();
    for _ in 0..clients {
        ranked.shuffle(rng);
        ranked.sort_by_key(|&c| std::cmp::Reverse(counts[c]));
        let mut hand: Vec<usize> = ranked
            .iter()
            .copied()
            .filter(|&c| counts[c] > 0)
            .take(per_client)
            .collect();
        if hand.len() < per_client {
            return Err(Error::Config(format!(
                "could not deal {per_client} distinct classes to {clients} clients \
                 from {n_classes} classes"
            )));
        }
        for &c in &hand {
            counts[c] -= 1;
        }
        hand.sort_unstable();
        hands.push(hand);
    }
    debug_assert!(counts.iter().all(|&c| c == 0));
    Ok(hands)
}

/// Splits the dataset across clients. Both the train and the test rows
/// are partitioned (no duplication, no loss); under `Pat`, a client's
/// test rows come from its own classes, and each class's rows are split
/// evenly across the clients holding that class.
pub fn partition<F: Float>(
    dataset: &Dataset<F>,
    spec: &PartitionSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ClientDataset<F>>> {
    let m = spec.clients;
    if m < 2 {
        return Err(Error::Config(format!("partition needs at least 2 clients, got {m}")));
    }
    if dataset.train.rows() < m || dataset.test.rows() < m {
        return Err(Error::Config(format!(
            "partition of {} train / {} test rows across {m} clients would leave empty shards",
            dataset.train.rows(),
            dataset.test.rows()
        )));
    }
    let (train_parts, test_parts) = match spec.scheme {
        PartitionScheme::Iid => (
            split_even_shuffled(dataset.train.rows(), m, rng),
            split_even_shuffled(dataset.test.rows(), m, rng),
        ),
        PartitionScheme::Pat(percent) => {
            if !matches!(percent, 10 | 20 | 50) {
                return Err(Error::Config(format!(
                    "pathological partition supports 10, 20, or 50 percent, got {percent}"
                )));
            }
            let c = dataset.n_classes;
            let per_client = (percent as usize * c).div_ceil(100);
            if percent == 10 && m != c {
                return Err(Error::Config(format!(
                    "Pat(10) assigns one class per client and requires clients == classes ({m} != {c})"
                )));
            }
            let slots = m * per_client;
            if !slots.is_multiple_of(c) {
                return Err(Error::Config(format!(
                    "Pat({percent}) with {m} clients and {c} classes needs {slots} class slots \
                     divisible by {c}"
                )));
            }
            let copies = slots / c;
            let hands = assign_classes(m, c, per_client, copies, rng)?;
            let train_by_class = indices_by_class(&dataset.train, c)?;
            let test_by_class = indices_by_class(&dataset.test, c)?;
            let mut train_parts = vec![Vec::new(); m];
            let mut test_parts = vec![Vec::new(); m];
            for class in 0..c {
                let owners: Vec<usize> = (0..m).filter(|&i| hands[i].contains(&class)).collect();
                for (pool, parts) in [
                    (&train_by_class[class], &mut train_parts),
                    (&test_by_class[class], &mut test_parts),
                ] {
                    let mut pool = pool.clone();
                    pool.shuffle(rng);
                    let base = pool.len() / owners.len();
                    let rem = pool.len() % owners.len();
                    let mut cursor = 0;
                    for (rank, &owner) in owners.iter().enumerate() {
                        let take = base + usize::from(rank < rem);
                        parts[owner].extend_from_slice(&pool[cursor..cursor + take]);
                        cursor += take;
                    }
                }
            }
            (train_parts, test_parts)
        }
    };
    Ok(train_parts
        .into_iter()
        .zip(test_parts)
        .enumerate()
        .map(|(client_id, (tr, te))| {
            let train = dataset.train.select(&tr);
            let n = train.rows();
            ClientDataset {
                client_id,
                train,
                test: dataset.test.select(&te),
                poisoned_mask: vec![false; n],
            }
        })
        .collect())
}

/// Stamps the trigger onto `floor(fraction * N)` randomly chosen training
/// rows of the client, rotating their labels by the trigger shift, and
/// builds the held-out attack testset: every clean test row of the
/// client, stamped, labeled with the rotated label.
pub fn poison<F: Float>(
    client: &ClientDataset<F>,
    trig: &TriggerSpec,
    fraction: f64,
    n_classes: usize,
    image_shape: Option<(usize, usize)>,
    rng: &mut ChaCha8Rng,
) -> Result<(ClientDataset<F>, Batch<F>)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("poison fraction {fraction} must lie in [0, 1]")));
    }
    trig.validate(n_classes, client.train.dim(), image_shape)?;
    let coords = trig.coords(client.train.dim(), image_shape);
    let value = cast::<F>(trig.patch_value);

    let n = client.train.rows();
    let n_poison = (fraction * n as f64).floor() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.truncate(n_poison);

    let mut train = client.train.clone();
    let mut mask = vec![false; n];
    for &i in &idx {
        let row = train.feature_row_mut(i);
        for &c in &coords {
            row[c] = value;
        }
        let shifted = (train.labels()[i] + trig.label_shift) % n_classes;
        train.set_label(i, shifted);
        mask[i] = true;
    }

    let mut trigger_test = client.test.clone();
    for i in 0..trigger_test.rows() {
        let row = trigger_test.feature_row_mut(i);
        for &c in &coords {
            row[c] = value;
        }
        let shifted = (trigger_test.labels()[i] + trig.label_shift) % n_classes;
        trigger_test.set_label(i, shifted);
    }

    let poisoned = ClientDataset {
        client_id: client.client_id,
        train,
        test: client.test.clone(),
        poisoned_mask: mask,
    };
    Ok((poisoned, trigger_test))
}


#[cfg(test)]
mod partition_properties {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn multiset(batches: Vec<&Batch<f64>>) -> Vec<(Vec<u64>, usize)> {
        let mut rows = Vec::new();
        for b in batches {
            for i in 0..b.rows() {
                let bits: Vec<u64> = b.feature_row(i).iter().map(|v| v.to_bits()).collect();
                rows.push((bits, b.labels()[i]));
            }
        }
        rows.sort();
        rows
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        /// Conservation: the union of client shards is exactly the
        /// source dataset, for both schemes, train and test alike.
        #[test]
        fn partition_conserves_rows(
            seed in 0u64..1000,
            n_classes in 2usize..6,
            per_class in 10usize..25,
            iid in proptest::bool::ANY,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ds = generate_blobs::<f64>(n_classes, per_class, 16, 0.2, &mut rng).unwrap();
            let spec = if iid {
                PartitionSpec { scheme: PartitionScheme::Iid, clients: 3 }
            } else {
                PartitionSpec { scheme: PartitionScheme::Pat(50), clients: n_classes }
            };
            let clients = partition(&ds, &spec, &mut rng).unwrap();
            prop_assert_eq!(
                multiset(clients.iter().map(|c| &c.train).collect()),
                multiset(vec![&ds.train])
            );
            prop_assert_eq!(
                multiset(clients.iter().map(|c| &c.test).collect()),
                multiset(vec![&ds.test])
            );
            for c in &clients {
                prop_assert!(c.train.rows() > 0);
                prop_assert!(c.test.rows() > 0);
            }
        }
    }
}
