//! Architecture audit plans: analytic per-row descriptions of a model's
//! topology (stage, dimension string, parameter count) computed without
//! allocating any weights. Used to verify that the paper-width profile
//! matches the published tables row-for-row and that a constructed desk
//! model's actual parameter count equals its plan.

/// One audited row of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchRow {
    /// Stage label, e.g. "down1" or "block x16".
    pub stage: String,
    /// Human-readable composition, e.g. "4 x ResNet2D + 1 x ResNet2D (AvgPool)".
    pub detail: String,
    /// Dimension transition, e.g. "384 -> 512".
    pub dims: String,
    /// Scalar parameter count of the row.
    pub params: usize,
}

impl ArchRow {
    pub fn new(
        stage: impl Into<String>,
        detail: impl Into<String>,
        dims: impl Into<String>,
        params: usize,
    ) -> Self {
        ArchRow { stage: stage.into(), detail: detail.into(), dims: dims.into(), params }
    }
}

/// Ordered audit rows for one model.
#[derive(Debug, Clone)]
pub struct ArchPlan {
    pub model: String,
    pub rows: Vec<ArchRow>,
}

impl ArchPlan {
    pub fn new(model: impl Into<String>) -> Self {
        ArchPlan { model: model.into(), rows: Vec::new() }
    }

    pub fn push(
        &mut self,
        stage: impl Into<String>,
        detail: impl Into<String>,
        dims: impl Into<String>,
        params: usize,
    ) {
        self.rows.push(ArchRow::new(stage, detail, dims, params));
    }

    /// Total parameters across all rows.
    pub fn total_params(&self) -> usize {
        self.rows.iter().map(|r| r.params).sum()
    }

    /// Row with the given stage label, if present.
    pub fn row(&self, stage: &str) -> Option<&ArchRow> {
        self.rows.iter().find(|r| r.stage == stage)
    }

    /// Render as an aligned text table.
    pub fn render(&self) -> String {
        let mut out = format!("{}\n", self.model);
        let stage_w = self.rows.iter().map(|r| r.stage.len()).max().unwrap_or(0).max(5);
        let dims_w = self.rows.iter().map(|r| r.dims.len()).max().unwrap_or(0).max(4);
        for r in &self.rows {
            out.push_str(&format!(
                "  {:stage_w$}  {:dims_w$}  {:>10}  {}\n",
                r.stage, r.dims, r.params, r.detail
            ));
        }
        out.push_str(&format!("  total params: {}\n", self.total_params()));
        out
    }
}
