use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use avfp_core::data::{load_test_rul, normalize, parse_cmapss, Dataset, NormalizationStats, Split};
use sha2::{Digest, Sha256};

use crate::{CliError, DataArgs};

pub const DATA_ENV: &str = "AVFP_DATA_DIR";

/// Raw train and test splits of one subset with the test ground truth.
pub struct Fleet {
    pub train: Dataset,
    pub test: Dataset,
    pub truth: BTreeMap<u32, f64>,
    pub files: Vec<PathBuf>,
}

/// Both splits normalized with statistics fitted on the training split.
pub struct Normalized {
    pub train: Dataset,
    pub test: Dataset,
    pub stats: NormalizationStats,
}

pub fn data_dir(args: &DataArgs) -> Result<PathBuf, CliError> {
    match (&args.data, std::env::var_os(DATA_ENV)) {
        (Some(d), _) => Ok(d.clone()),
        (None, Some(d)) => Ok(PathBuf::from(d)),
        (None, None) => Err(CliError::Usage(format!("no data directory: pass --data or set {DATA_ENV}"))),
    }
}

impl Fleet {
    pub fn load(args: &DataArgs) -> Result<Self, CliError> {
        let dir = data_dir(args)?;
        let s = &args.subset;
        let files: Vec<PathBuf> =
            [format!("train_{s}.txt"), format!("test_{s}.txt"), format!("RUL_{s}.txt")].iter().map(|f| dir.join(f)).collect();
        if let Some(missing) = files.iter().find(|f| !f.is_file()) {
            return Err(CliError::Data(format!("missing data file {}", missing.display())));
        }
        let train = parse_cmapss(&files[0], Split::Train)?;
        let test = parse_cmapss(&files[1], Split::Test)?;
        let truth = load_test_rul(&files[2], &test)?;
        log::info!("{s}: {} training units ({} rows), {} test units", train.n_units(), train.n_rows(), test.n_units());
        Ok(Self { train, test, truth, files })
    }

    /// Normalizes with `stats` when given, otherwise fits them on train.
    pub fn normalized(&self, stats: Option<&NormalizationStats>) -> Result<Normalized, CliError> {
        let (train, stats) = normalize(&self.train, stats)?;
        let (test, _) = normalize(&self.test, Some(&stats))?;
        Ok(Normalized { train, test, stats })
    }

    /// `(file name, SHA-256)` of every input file.
    pub fn checksums(&self) -> Result<BTreeMap<String, String>, CliError> {
        self.files.iter().map(|f| Ok((file_name(f), sha256_file(f)?))).collect()
    }
}

pub fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn sha256_file(p: &Path) -> Result<String, CliError> {
    Ok(hex::encode(Sha256::digest(std::fs::read(p)?)))
}
