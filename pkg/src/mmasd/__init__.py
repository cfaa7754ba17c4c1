"""Multimodal action and ASD classification from privacy-preserving features."""

__version__ = "0.1.0"

ACTION_NAMES = (
    "Arm Swing",
    "Body Swing",
    "Chest Expansion",
    "Drumming",
    "Sing and Clap",
    "Twist Pose",
    "Tree Pose",
    "Frog Pose",
    "Squat Pose",
    "Marcas Forward Shaking",
    "Marcas Shaking",
)
N_ACTIONS = len(ACTION_NAMES)
