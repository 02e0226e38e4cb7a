"""RGB-D salient object detection with dual mutual fusion and a
transformer-infused reconstruction decoder."""

from .model import GLDMNet, SaliencyOutput, build

__all__ = ["GLDMNet", "SaliencyOutput", "build"]
__version__ = "0.1.0"
