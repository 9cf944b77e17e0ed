//! Black-box segmentation predictors.
//!
//! A predictor maps a CT/PET pair to a voxelwise lesion-probability map.
//! Three bindings exist: maps precomputed offline by a real network, an
//! external command exchanging NIfTI files, and a synthetic oracle used for
//! desk-scale experiments.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::io::{find_nifti, read_nifti, write_nifti};
use crate::volume::{geometry_match, Volume3D};

/// Anything that turns a CT/PET pair into a probability map.
///
/// `aug_index` identifies which augmentation produced the inputs, so that
/// bindings serving offline predictions can return the matching file.
pub trait Predictor: Send + Sync {
    fn predict(&self, ct: &Volume3D, pet: &Volume3D, case_id: &str, aug_index: usize) -> Result<Volume3D>;
}

/// Parameters of the synthetic oracle predictor.
///
/// Output is `sigmoid((pet - pet_threshold) / softness) + bias[aug] + noise`
/// clipped to `[0, 1]`. Thresholds are in the units of the PET volume the
/// oracle receives; the defaults assume PET already scaled by the default
/// window, where 0.2 corresponds to SUV 3.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleParams {
    pub pet_threshold: f64,
    pub softness: f64,
    #[serde(deserialize_with = "index_keyed_map")]
    pub per_augmentation_bias: BTreeMap<usize, f64>,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// JSON object keys are strings; parse them as augmentation indices.
fn index_keyed_map<'de, D>(de: D) -> std::result::Result<BTreeMap<usize, f64>, D::Error>
where
    D: serde::Deserializer<'de>,
{
    use serde::de::Error as _;
    BTreeMap::<String, f64>::deserialize(de)?
        .into_iter()
        .map(|(k, v)| {
            k.parse::<usize>()
                .map(|i| (i, v))
                .map_err(|_| D::Error::custom(format!("bias key `{k}` is not an augmentation index")))
        })
        .collect()
}

impl Default for OracleParams {
    fn default() -> Self {
        OracleParams {
            pet_threshold: 0.2,
            softness: 0.02,
            per_augmentation_bias: BTreeMap::new(),
            noise_sigma: 0.0,
            seed: 0,
        }
    }
}

impl OracleParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.softness > 0.0) || !self.softness.is_finite() {
            return param(format!("oracle softness must be > 0, got {}", self.softness));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return param(format!("oracle noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        if !self.pet_threshold.is_finite() || self.per_augmentation_bias.values().any(|b| !b.is_finite()) {
            return param("oracle threshold and biases must be finite");
        }
        Ok(())
    }
}

/// How predictions are obtained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PredictorBinding {
    /// Reads `<directory>/<case_id>/aug_<index>.nii[.gz]`.
    Precomputed { directory: PathBuf },
    /// Runs `command` through `sh -c` after substituting `{ct}`, `{pet}` and
    /// `{out}` with NIfTI file paths.
    Subprocess {
        command: String,
        timeout_seconds: f64,
        /// Concurrent process limit; defaults to the number of processors.
        #[serde(default)]
        max_workers: Option<usize>,
    },
    SyntheticOracle(OracleParams),
}

impl Default for PredictorBinding {
    fn default() -> Self {
        PredictorBinding::SyntheticOracle(OracleParams::default())
    }
}

impl PredictorBinding {
    pub fn validate(&self) -> Result<()> {
        match self {
            PredictorBinding::Precomputed { .. } => Ok(()),
            PredictorBinding::Subprocess { command, timeout_seconds, max_workers } => {
                for ph in ["{ct}", "{pet}", "{out}"] {
                    if !command.contains(ph) {
                        return param(format!("command template is missing the {ph} placeholder"));
                    }
                }
                if !(*timeout_seconds > 0.0) || !timeout_seconds.is_finite() {
                    return param(format!("timeout_seconds must be > 0, got {timeout_seconds}"));
                }
                if *max_workers == Some(0) {
                    return param("max_workers must be positive");
                }
                Ok(())
            }
            PredictorBinding::SyntheticOracle(p) => p.validate(),
        }
    }

    pub fn build(&self) -> Result<Box<dyn Predictor>> {
        self.validate()?;
        Ok(match self {
            PredictorBinding::Precomputed { directory } => {
                Box::new(PrecomputedPredictor { directory: directory.clone() })
            }
            PredictorBinding::Subprocess { command, timeout_seconds, max_workers } => {
                let workers = max_workers.unwrap_or_else(|| {
                    thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
                });
                Box::new(SubprocessPredictor::new(
                    command.clone(),
                    Duration::from_secs_f64(*timeout_seconds),
                    workers,
                ))
            }
            PredictorBinding::SyntheticOracle(p) => Box::new(SyntheticOracle::new(p.clone())?),
        })
    }
}

/// One-shot prediction through `binding`, validated against the input CT.
pub fn predict(
    binding: &PredictorBinding,
    ct: &Volume3D,
    pet: &Volume3D,
    case_id: &str,
    aug_index: usize,
) -> Result<Volume3D> {
    checked_predict(binding.build()?.as_ref(), ct, pet, case_id, aug_index)
}

/// Runs `predictor` and enforces the output contract.
pub fn checked_predict(
    predictor: &dyn Predictor,
    ct: &Volume3D,
    pet: &Volume3D,
    case_id: &str,
    aug_index: usize,
) -> Result<Volume3D> {
    if !geometry_match(ct, pet) {
        return param(format!("case {case_id}: CT and PET geometry differ"));
    }
    let prob = predictor.predict(ct, pet, case_id, aug_index)?;
    validate_prediction(&prob, ct)?;
    Ok(prob)
}

/// Checks geometry against `reference` and that every value is a finite
/// probability.
pub fn validate_prediction(prob: &Volume3D, reference: &Volume3D) -> Result<()> {
    if !geometry_match(prob, reference) {
        return Err(Error::ContractViolation(format!(
            "prediction geometry {:?} differs from input {:?}",
            prob.geometry(),
            reference.geometry()
        )));
    }
    if let Some((i, v)) = prob
        .data()
        .iter()
        .enumerate()
        .find(|(_, v)| !v.is_finite() || !(0.0..=1.0).contains(*v))
    {
        return Err(Error::ContractViolation(format!(
            "prediction value {v} at voxel {:?} is not a probability",
            prob.geometry().coords(i)
        )));
    }
    Ok(())
}

pub struct PrecomputedPredictor {
    directory: PathBuf,
}

impl Predictor for PrecomputedPredictor {
    fn predict(&self, _ct: &Volume3D, _pet: &Volume3D, case_id: &str, aug_index: usize) -> Result<Volume3D> {
        let case_dir = self.directory.join(case_id);
        let stem = format!("aug_{aug_index}");
        let path = find_nifti(&case_dir, &stem)
            .ok_or_else(|| Error::NotFound(case_dir.join(format!("{stem}.nii"))))?;
        read_nifti(path)
    }
}

/// Counting semaphore bounding concurrent child processes.
struct Slots {
    free: Mutex<usize>,
    cv: Condvar,
}

struct SlotGuard<'a>(&'a Slots);

impl Slots {
    fn acquire(&self) -> SlotGuard<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        SlotGuard(self)
    }
}

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

pub struct SubprocessPredictor {
    command: String,
    timeout: Duration,
    slots: Slots,
}

fn shell_quote(p: &Path) -> String {
    format!("'{}'", p.display().to_string().replace('\'', r"'\''"))
}

fn drain<R: Read + Send + 'static>(r: Option<R>) -> thread::JoinHandle<String> {
    thread::spawn(move || {
        let mut s = String::new();
        if let Some(mut r) = r {
            let mut buf = Vec::new();
            let _ = r.read_to_end(&mut buf);
            s = String::from_utf8_lossy(&buf).into_owned();
        }
        s
    })
}

impl SubprocessPredictor {
    pub fn new(command: String, timeout: Duration, max_workers: usize) -> Self {
        SubprocessPredictor {
            command,
            timeout,
            slots: Slots { free: Mutex::new(max_workers.max(1)), cv: Condvar::new() },
        }
    }

    fn run(&self, command: &str) -> Result<()> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()?;
        let out = drain(child.stdout.take());
        let err = drain(child.stderr.take());
        let deadline = Instant::now() + self.timeout;
        let status = loop {
            if let Some(status) = child.try_wait()? {
                break status;
            }
            if Instant::now() >= deadline {
                let _ = child.kill();
                let _ = child.wait();
                // readers may stay blocked on grandchildren holding the pipes
                return Err(Error::PredictorFailure {
                    message: format!("`{command}` timed out after {:?}", self.timeout),
                    diagnostics: String::new(),
                });
            }
            thread::sleep(Duration::from_millis(5));
        };
        let diagnostics = format!(
            "stdout:\n{}\nstderr:\n{}",
            out.join().unwrap_or_default(),
            err.join().unwrap_or_default()
        );
        if !status.success() {
            return Err(Error::PredictorFailure {
                message: format!("`{command}` exited with {status}"),
                diagnostics,
            });
        }
        Ok(())
    }
}

impl Predictor for SubprocessPredictor {
    fn predict(&self, ct: &Volume3D, pet: &Volume3D, case_id: &str, aug_index: usize) -> Result<Volume3D> {
        let _slot = self.slots.acquire();
        let dir = tempfile::Builder::new().prefix("ttafuse-pred-").tempdir()?;
        let ct_path = dir.path().join("ct.nii");
        let pet_path = dir.path().join("pet.nii");
        let out_path = dir.path().join("pred.nii");
        write_nifti(ct, &ct_path)?;
        write_nifti(pet, &pet_path)?;
        let command = self
            .command
            .replace("{ct}", &shell_quote(&ct_path))
            .replace("{pet}", &shell_quote(&pet_path))
            .replace("{out}", &shell_quote(&out_path));
        self.run(&command)?;
        let found = find_nifti(dir.path(), "pred").or_else(|| out_path.is_file().then(|| out_path.clone()));
        match found {
            Some(p) => read_nifti(p),
            None => Err(Error::PredictorFailure {
                message: format!("case {case_id} aug {aug_index}: predictor wrote no output file"),
                diagnostics: String::new(),
            }),
        }
    }
}

/// 64-bit FNV-1a, used to derive stable per-(case, augmentation) seeds.
fn fnv1a(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for &b in *part {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        // separator so ("ab", "c") and ("a", "bc") differ
        h ^= 0xff;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Voxelwise PET-threshold predictor with controllable per-augmentation bias.
pub struct SyntheticOracle {
    params: OracleParams,
}

impl SyntheticOracle {
    pub fn new(params: OracleParams) -> Result<Self> {
        params.validate()?;
        Ok(SyntheticOracle { params })
    }

    pub fn params(&self) -> &OracleParams {
        &self.params
    }
}

impl Predictor for SyntheticOracle {
    fn predict(&self, _ct: &Volume3D, pet: &Volume3D, case_id: &str, aug_index: usize) -> Result<Volume3D> {
        let p = &self.params;
        let bias = p.per_augmentation_bias.get(&aug_index).copied().unwrap_or(0.0);
        let mut rng = (p.noise_sigma > 0.0).then(|| {
            let seed = fnv1a(&[&p.seed.to_le_bytes(), case_id.as_bytes(), &(aug_index as u64).to_le_bytes()]);
            ChaCha8Rng::seed_from_u64(seed)
        });
        let data = pet
            .data()
            .iter()
            .map(|&v| {
                let z = (v as f64 - p.pet_threshold) / p.softness;
                let mut prob = 1.0 / (1.0 + (-z).exp()) + bias;
                if let Some(rng) = rng.as_mut() {
                    let n: f64 = StandardNormal.sample(rng);
                    prob += p.noise_sigma * n;
                }
                prob.clamp(0.0, 1.0) as f32
            })
            .collect();
        Volume3D::new(*pet.geometry(), data)
    }
}
