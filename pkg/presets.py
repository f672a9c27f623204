from model import ModelConfig

# Named model configurations. `revit list` shows every ModelConfig defined here.

# Default desk-scale CIFAR-10 encoder.
cifar_small = ModelConfig(
    image_size=32,
    patch_size=8,
    dim=64,
    depth=6,
    heads=4,
    num_classes=10,
)

# Small enough for the equivalence and permutation checks.
toy = ModelConfig(
    image_size=16,
    patch_size=4,
    dim=16,
    depth=2,
    heads=2,
    mlp_ratio=2.0,
    num_classes=4,
)

# Single block, trains to near-perfect accuracy on synthetic squares.
smoke = ModelConfig(
    image_size=16,
    patch_size=4,
    dim=16,
    depth=1,
    heads=2,
    mlp_ratio=2.0,
    num_classes=4,
)

tiny = ModelConfig(
    image_size=32,
    patch_size=8,
    dim=32,
    depth=4,
    heads=4,
    mlp_ratio=2.0,
    num_classes=10,
)

gradcheck = ModelConfig(
    image_size=8,
    patch_size=4,
    channels=3,
    dim=32,
    depth=2,
    heads=2,
    mlp_ratio=2.0,
    num_classes=3,
)
