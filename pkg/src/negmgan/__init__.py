"""Non-exhaustive learning with a Gaussian-mixture BiGAN."""
