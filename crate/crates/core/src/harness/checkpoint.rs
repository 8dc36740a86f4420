//! Checkpoint directory: `config.json`, `manifest.txt` and one UTT1 file
//! per named tensor.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{utt1, Parameters};
use crate::backbone::{TrackerConfig, UnTrack};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const HEADER: &str = "# untrack checkpoint v1";

pub fn save_checkpoint<S: Scalar>(model: &UnTrack<S>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = format!("{HEADER}\nwrapped {}\n", u8::from(model.is_wrapped()));
    let mut result = Ok(());
    model.visit("", &mut |name, t| {
        if result.is_err() {
            return;
        }
        let file = format!("{name}.utt1");
        writeln!(manifest, "{name} {file} {}", u8::from(t.requires_grad())).expect("string write");
        result = utt1::save(t, &dir.join(&file));
    });
    result?;
    let config = serde_json::to_string_pretty(&model.config).expect("config serializes");
    utt1::write_atomic(&dir.join("config.json"), config.as_bytes())?;
    utt1::write_atomic(&dir.join("manifest.txt"), manifest.as_bytes())
}

pub fn load_checkpoint<S: Scalar>(dir: &Path) -> Result<UnTrack<S>> {
    let config_text = fs::read_to_string(dir.join("config.json"))?;
    let config: TrackerConfig = serde_json::from_str(&config_text)
        .map_err(|e| Error::format(e.column() as u64, format!("config.json: {e}")))?;
    let text = fs::read_to_string(dir.join("manifest.txt"))?;
    let mut entries: BTreeMap<String, (String, bool)> = BTreeMap::new();
    let mut wrapped = false;
    let mut offset = 0u64;
    for (i, line) in text.split_inclusive('\n').enumerate() {
        let here = offset;
        offset += line.len() as u64;
        let line = line.trim();
        if i == 0 {
            if line != HEADER {
                return Err(Error::format(0, "missing checkpoint header"));
            }
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        match f[..] {
            [] => {}
            ["wrapped", w] => wrapped = w == "1",
            [name, file, flag @ ("0" | "1")] => {
                entries.insert(name.to_string(), (file.to_string(), flag == "1"));
            }
            _ => return Err(Error::format(here, format!("bad manifest line '{line}'"))),
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = UnTrack::<S>::new(config, &mut rng)?;
    if wrapped {
        model.prepare_finetune(&mut rng)?;
    }
    let mut result = Ok(());
    let mut seen = 0usize;
    model.visit_mut("", &mut |name, t| {
        if result.is_err() {
            return;
        }
        let Some((file, trainable)) = entries.get(&name) else {
            result = Err(Error::format(0, format!("manifest lacks tensor '{name}'")));
            return;
        };
        seen += 1;
        result = utt1::load::<S>(&dir.join(file)).and_then(|loaded| {
            if loaded.dims() != t.dims() {
                return Err(Error::Config(format!(
                    "tensor '{name}' has dims {:?}, model expects {:?}",
                    loaded.dims(),
                    t.dims()
                )));
            }
            t.data_mut().copy_from_slice(loaded.data());
            t.set_requires_grad(*trainable);
            Ok(())
        });
    });
    result?;
    if seen != entries.len() {
        return Err(Error::Config(format!(
            "checkpoint holds {} tensors, model has {seen}",
            entries.len()
        )));
    }
    Ok(model)
}
