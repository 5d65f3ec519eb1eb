use std::io::Write;

use super::{Model, NetworkConfig, Variant};
use crate::copa::PathwayKind;
use crate::error::Result;

/// One row of the per-stage deployment table.
#[derive(Clone, Debug, PartialEq)]
pub struct DeploymentRow {
    pub stage: String,
    pub output_size: usize,
    pub units: usize,
    pub layers: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub params: usize,
    pub cumulative: usize,
}

fn pathway_layers(config: &NetworkConfig, stage: usize) -> String {
    let w = config.stage_widths()[stage];
    let mid = config.stage_mids()[stage];
    let inner = match config.pathway {
        PathwayKind::Bottleneck => format!("1x1,{mid} | 3x3,{mid} | 1x1,{w}"),
        PathwayKind::Basic => format!("3x3,{w} | 3x3,{w}"),
    };
    format!("{} x [{inner}]", config.k)
}

/// Per-stage layout and parameter budget. The final row holds the totals.
pub fn deployment_table(config: &NetworkConfig) -> Result<Vec<DeploymentRow>> {
    let model: Model<f32> = Model::build(config)?;
    let counts = model.stage_parameter_counts();
    let count_of = |name: &str| counts.iter().find(|(n, _)| n == name).map_or(0, |(_, c)| *c);
    let units = config.units_per_stage()?;
    let size = config.input_size;
    let widths = config.stage_widths();

    let mut rows = Vec::new();
    let mut cumulative = 0;
    let mut push = |stage: String, output_size, units, layers: String, cin, cout, params| {
        cumulative += params;
        rows.push(DeploymentRow {
            stage,
            output_size,
            units,
            layers,
            in_channels: cin,
            out_channels: cout,
            params,
            cumulative,
        });
    };
    push(
        "stem".into(),
        size,
        0,
        format!("3x3 conv,{}", widths[0]),
        config.input_channels,
        widths[0],
        count_of("stem"),
    );
    for (b, block) in model.network.blocks.iter().enumerate() {
        let mut layers = pathway_layers(config, b);
        if block.in_channels != widths[b] {
            layers.push_str(&format!(" + proj 1x1,{}", widths[b]));
        }
        if config.variant == Variant::R && b > 0 {
            layers.push_str(&format!(" ; concat carried {}", block.in_channels));
        }
        push(
            format!("block{}", b + 1),
            size >> b,
            units,
            layers,
            block.in_channels,
            block.out_channels,
            count_of(&format!("block{b}")),
        );
    }
    let cin = model.classifier_in_channels();
    push(
        "classifier".into(),
        1,
        0,
        format!("BN-ReLU, global avgpool, fc {cin}->{}", config.num_classes),
        cin,
        config.num_classes,
        count_of("head"),
    );
    let total = model.count_parameters();
    push("total".into(), 1, units * 3, String::new(), config.input_channels, config.num_classes, 0);
    debug_assert_eq!(rows.last().map(|r| r.cumulative), Some(total));
    rows.last_mut().expect("non-empty").params = total;
    Ok(rows)
}

pub fn write_deployment_csv<W: Write>(rows: &[DeploymentRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "stage",
        "output_size",
        "units",
        "layers",
        "in_channels",
        "out_channels",
        "params",
        "cumulative_params",
    ])?;
    for r in rows {
        w.write_record([
            r.stage.clone(),
            r.output_size.to_string(),
            r.units.to_string(),
            r.layers.clone(),
            r.in_channels.to_string(),
            r.out_channels.to_string(),
            r.params.to_string(),
            r.cumulative.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spatial_sizes_follow_pooling() {
        let rows = deployment_table(&NetworkConfig::with_units(2, 2, 1)).unwrap();
        let sizes: Vec<usize> = rows[1..5].iter().map(|r| r.output_size).collect();
        assert_eq!(sizes, vec![32, 16, 8, 1]);
        assert_eq!(rows[3].out_channels, 180);
    }

    #[test]
    fn total_row_equals_model_count() {
        let cfg = NetworkConfig::with_units(3, 2, 1);
        let rows = deployment_table(&cfg).unwrap();
        let model: Model<f32> = Model::build(&cfg).unwrap();
        let total = rows.last().unwrap();
        assert_eq!(total.stage, "total");
        assert_eq!(total.params, model.count_parameters());
        let sum: usize = rows[..rows.len() - 1].iter().map(|r| r.params).sum();
        assert_eq!(sum, total.params);
    }
}
