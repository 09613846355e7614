//! Benchmark dataset presets: class counts, input shapes, default task
//! splits, network widths, and raw-file layout.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RawFormat {
    /// IDX ubyte image/label pairs (MNIST family), optionally gzipped.
    Idx,
    /// CIFAR-10 binary batches.
    Cifar10,
    /// CIFAR-100 binary train/test files.
    Cifar100,
    /// No ingester; the canonical cache must be provided directly.
    CacheOnly,
}

#[derive(Debug, Clone)]
pub struct Preset {
    /// Canonical directory name under the data root.
    pub name: &'static str,
    pub num_classes: usize,
    pub default_tasks: usize,
    pub input_shape: (usize, usize, usize),
    pub latent_dim: usize,
    /// Encoder conv widths; decoder mirrors them.
    pub enc_channels: &'static [usize],
    /// Classifier trunk conv widths.
    pub head_channels: &'static [usize],
    /// Hidden width of the extra FC layer, for heads with two FC stages.
    pub head_fc_hidden: Option<usize>,
    /// Per-task pixel permutations attached at sequence build time.
    pub permuted: bool,
    pub raw_format: RawFormat,
    /// Download URLs for the raw files, when a canonical mirror serves
    /// them as plain files.
    pub download_urls: &'static [&'static str],
}

const MNIST_URLS: &[&str] = &[
    "https://ossci-datasets.s3.amazonaws.com/mnist/train-images-idx3-ubyte.gz",
    "https://ossci-datasets.s3.amazonaws.com/mnist/train-labels-idx1-ubyte.gz",
    "https://ossci-datasets.s3.amazonaws.com/mnist/t10k-images-idx3-ubyte.gz",
    "https://ossci-datasets.s3.amazonaws.com/mnist/t10k-labels-idx1-ubyte.gz",
];

const FASHION_URLS: &[&str] = &[
    "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/train-images-idx3-ubyte.gz",
    "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/train-labels-idx1-ubyte.gz",
    "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/t10k-images-idx3-ubyte.gz",
    "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/t10k-labels-idx1-ubyte.gz",
];

const MNIST_SHAPED: (usize, usize, usize) = (1, 28, 28);
const CIFAR_SHAPED: (usize, usize, usize) = (3, 32, 32);

pub const PRESETS: &[Preset] = &[
    Preset {
        name: "mnist",
        num_classes: 10,
        default_tasks: 5,
        input_shape: MNIST_SHAPED,
        latent_dim: 108,
        enc_channels: &[3, 6, 12, 24],
        head_channels: &[4, 8, 16, 32],
        head_fc_hidden: None,
        permuted: false,
        raw_format: RawFormat::Idx,
        download_urls: MNIST_URLS,
    },
    Preset {
        // Permuted MNIST; the original evaluation calls this QMNIST.
        name: "pmnist",
        num_classes: 10,
        default_tasks: 5,
        input_shape: MNIST_SHAPED,
        latent_dim: 108,
        enc_channels: &[3, 6, 12, 24],
        head_channels: &[4, 8, 16, 32],
        head_fc_hidden: None,
        permuted: true,
        raw_format: RawFormat::Idx,
        download_urls: MNIST_URLS,
    },
    Preset {
        name: "fashion_mnist",
        num_classes: 10,
        default_tasks: 5,
        input_shape: MNIST_SHAPED,
        latent_dim: 108,
        enc_channels: &[3, 6, 12, 24],
        head_channels: &[4, 8, 16, 32],
        head_fc_hidden: None,
        permuted: false,
        raw_format: RawFormat::Idx,
        download_urls: FASHION_URLS,
    },
    Preset {
        name: "emnist",
        num_classes: 26,
        default_tasks: 13,
        input_shape: MNIST_SHAPED,
        latent_dim: 108,
        enc_channels: &[3, 6, 12, 24],
        head_channels: &[4, 8, 16, 32],
        head_fc_hidden: None,
        permuted: false,
        raw_format: RawFormat::Idx,
        download_urls: &[],
    },
    Preset {
        name: "cifar10",
        num_classes: 10,
        default_tasks: 5,
        input_shape: CIFAR_SHAPED,
        latent_dim: 192,
        enc_channels: &[16, 32, 64, 128],
        head_channels: &[16, 32],
        head_fc_hidden: Some(128),
        permuted: false,
        raw_format: RawFormat::Cifar10,
        download_urls: &[],
    },
    Preset {
        name: "cifar100",
        num_classes: 100,
        default_tasks: 20,
        input_shape: CIFAR_SHAPED,
        latent_dim: 192,
        enc_channels: &[16, 32, 64, 128],
        head_channels: &[16, 32],
        head_fc_hidden: None,
        permuted: false,
        raw_format: RawFormat::Cifar100,
        download_urls: &[],
    },
    Preset {
        name: "svhn",
        num_classes: 10,
        default_tasks: 5,
        input_shape: CIFAR_SHAPED,
        latent_dim: 192,
        enc_channels: &[16, 32, 64, 128],
        head_channels: &[16, 32],
        head_fc_hidden: Some(128),
        permuted: false,
        raw_format: RawFormat::CacheOnly,
        download_urls: &[],
    },
    Preset {
        name: "mini_imagenet",
        num_classes: 100,
        default_tasks: 20,
        input_shape: (3, 84, 84),
        latent_dim: 96,
        enc_channels: &[8, 16, 32, 64, 128],
        head_channels: &[8, 16, 32, 64],
        head_fc_hidden: None,
        permuted: false,
        raw_format: RawFormat::CacheOnly,
        download_urls: &[],
    },
];

/// Look up a preset, accepting common aliases.
pub fn preset(name: &str) -> Result<&'static Preset> {
    let key = name.to_ascii_lowercase().replace(['-', ' '], "_");
    let key = match key.as_str() {
        "qmnist" | "permuted_mnist" => "pmnist",
        "fmnist" | "f_mnist" | "fashionmnist" => "fashion_mnist",
        "miniimagenet" | "mimagenet" => "mini_imagenet",
        other => other,
    };
    PRESETS
        .iter()
        .find(|p| p.name == key)
        .ok_or_else(|| Error::UnknownDataset(name.to_string()))
}

impl Preset {
    /// Raw file names under `<root>/<name>/raw/`, without the optional
    /// `.gz` suffix.
    pub fn raw_files(&self) -> Vec<&'static str> {
        match self.raw_format {
            RawFormat::Idx => vec![
                "train-images-idx3-ubyte",
                "train-labels-idx1-ubyte",
                "t10k-images-idx3-ubyte",
                "t10k-labels-idx1-ubyte",
            ],
            RawFormat::Cifar10 => vec![
                "data_batch_1.bin",
                "data_batch_2.bin",
                "data_batch_3.bin",
                "data_batch_4.bin",
                "data_batch_5.bin",
                "test_batch.bin",
            ],
            RawFormat::Cifar100 => vec!["train.bin", "test.bin"],
            RawFormat::CacheOnly => vec![],
        }
    }
}
