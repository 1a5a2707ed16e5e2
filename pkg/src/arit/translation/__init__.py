from arit.translation.losses import (
    PatchFeatureBatch,
    cycle_loss,
    discriminator_loss,
    gan_loss,
    gan_loss_logits,
    generator_adv_loss,
    info_nce,
    patch_nce_loss,
    resilient_loss,
    sample_patch_pairs,
)
from arit.translation.model import (
    LossWeights,
    ModelConfig,
    TranslationModel,
    discriminator_step_losses,
    forward_full,
    generator_step_losses,
    global_objective,
    local_objective,
    stage_objective,
)
from arit.translation.networks import (
    Discriminator,
    DiscriminatorSpec,
    Generator,
    GeneratorSpec,
    ProjectionHead,
    count_parameters,
)
