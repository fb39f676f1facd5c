from .modifiers import (
    DB_TOKEN,
    TI_TOKEN,
    DomainModifier,
    LearnedToken,
    ModifierError,
    ModifierKind,
    apply_modifier,
    domain_presets,
    install_token,
    make_modifier,
    token_filename,
)
from .personalization import (
    PersonalizationConfig,
    denoising_loss,
    dreambooth_config,
    load_dreambooth,
    textual_inversion_config,
    train_dreambooth,
    train_textual_inversion,
)
