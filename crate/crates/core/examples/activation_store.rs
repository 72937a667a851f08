//! Streams activation records to disk, reads them back through the manifest,
//! and looks one vector up by address.
//!
//! ```bash
//! cargo run --example activation_store
//! ```

use conflict_probe::backend::{ActivationRecord, BackendMeta, ModuleDims, ModuleKind, TokenRole};
use conflict_probe::storage::{manifest_path, ActivationStore, StoreWriter};

fn main() -> anyhow::Result<()> {
    let meta = BackendMeta {
        model_name: "demo".into(),
        num_layers: 2,
        dims: ModuleDims {
            mlp_l1: 8,
            mlp_l2: 4,
            mhsa: 4,
        },
    };
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("acts.aprb");

    let mut writer = StoreWriter::create(&path, meta.clone())?;
    let mut written = 0;
    for example_id in 0..3u32 {
        for layer in 0..2u16 {
            for module in ModuleKind::ALL {
                for role in TokenRole::ALL {
                    let dim = meta.dims.get(module);
                    let vector = (0..dim)
                        .map(|i| example_id as f32 + layer as f32 / 10.0 + i as f32 / 100.0)
                        .collect();
                    writer.append(&ActivationRecord {
                        example_id,
                        layer,
                        module,
                        role,
                        vector,
                    })?;
                    written += 1;
                }
            }
        }
    }
    writer.finish()?;

    let bytes = std::fs::metadata(&path)?.len();
    println!("wrote {written} records, {bytes} bytes");
    let manifest = std::fs::read_to_string(manifest_path(&path))?;
    println!("manifest header: {}", manifest.lines().next().unwrap_or(""));

    let store = ActivationStore::read(&path)?;
    let v = store
        .get(2, 1, ModuleKind::MlpL1, TokenRole::RelationQ)
        .expect("record present");
    println!("example 2, layer 1, MLP-L1, relation_q: {v:?}");
    Ok(())
}
