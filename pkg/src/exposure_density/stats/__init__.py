from .anova import AnovaResult, TukeyResult, anova_oneway, ptukey, qtukey, tukey_hsd
from .outcomes import (
    COVARIATE_COLUMNS,
    RATE_COLUMNS,
    counterfactual_cases,
    lag_join,
    pearson,
    read_covariates,
    read_rates,
)
from .regression import (
    DesignSpec,
    RegressionResult,
    build_design,
    coefficient_table,
    ols,
    ols_fit,
    parse_model_spec,
    percent_effect,
    vif,
)

__all__ = [
    "AnovaResult",
    "TukeyResult",
    "anova_oneway",
    "ptukey",
    "qtukey",
    "tukey_hsd",
    "COVARIATE_COLUMNS",
    "RATE_COLUMNS",
    "counterfactual_cases",
    "lag_join",
    "pearson",
    "read_covariates",
    "read_rates",
    "DesignSpec",
    "RegressionResult",
    "build_design",
    "coefficient_table",
    "ols",
    "ols_fit",
    "parse_model_spec",
    "percent_effect",
    "vif",
]
