//! Descriptor files produced outside the crate (the CNN exporter writes the
//! same layout) must drive the pipeline exactly like in-memory descriptors.

use std::fs;

use scalecode::descriptors::synth::{synth_dataset, ScaleSignal, SynthConfig};
use scalecode::descriptors::{read_descriptors, DescriptorDir, InstanceDescriptors};
use scalecode::pipeline::{run, Experiment};

/// Packs an instance field by field: magic, version, D, block count, then
/// per block the factor, row count and `(x, y, D values)` rows, all
/// little-endian.
fn pack(desc: &InstanceDescriptors) -> Vec<u8> {
    let mut out = b"SCDF".to_vec();
    out.extend(1u32.to_le_bytes());
    out.extend((desc.dim() as u32).to_le_bytes());
    out.extend((desc.blocks().len() as u32).to_le_bytes());
    for (b, block) in desc.blocks().iter().enumerate() {
        out.extend(block.scale_factor.to_le_bytes());
        out.extend((block.positions.len() as u32).to_le_bytes());
        for (pos, row) in block.positions.iter().zip(desc.rows(b)) {
            out.extend(pos[0].to_le_bytes());
            out.extend(pos[1].to_le_bytes());
            for v in row {
                out.extend(v.to_le_bytes());
            }
        }
    }
    out
}

#[test]
fn externally_written_files_match_in_memory_run() {
    let data = synth_dataset(&SynthConfig::new(3, 24, 21, ScaleSignal::Relative)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for desc in &data.descriptors {
        fs::write(dir.path().join(format!("{}.scdf", desc.instance_id)), pack(desc)).unwrap();
    }
    let exp = Experiment {
        k: 3,
        samples_per_image: 40,
        ..Experiment::default()
    };
    let from_files = run(&data.manifest, &DescriptorDir::new(dir.path()), &exp, None).unwrap();
    let in_memory = run(&data.manifest, &data.store(), &exp, None).unwrap();
    for (a, b) in from_files.reports().zip(in_memory.reports()) {
        assert_eq!(a, b);
    }
}

#[test]
fn exporter_sized_file_round_trips() {
    // 21 scales of 512-d activations, as the CNN exporter emits
    let data = synth_dataset(&SynthConfig {
        dim: 512,
        ..SynthConfig::new(2, 3, 2, ScaleSignal::Absolute)
    })
    .unwrap();
    let desc = &data.descriptors[0];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join(format!("{}.scdf", desc.instance_id));
    fs::write(&path, pack(desc)).unwrap();
    let back = read_descriptors(&path).unwrap();
    assert_eq!(&back, desc);
    assert_eq!(back.blocks().len(), 21);
    assert_eq!(back.dim(), 512);
}
