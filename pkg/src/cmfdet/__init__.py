"""Two-stream RGB/thermal object detection with token-attention fusion.

Subpackages:
    tensor      minimal autodiff engine (numpy-backed)
    fusion      the cross-modality fusion transformer module
    model       two-stream backbone, detection head, decode, NMS
    losses      GIoU / cross-entropy / objectness training objective
    metrics     IoU matching, AP, mAP50/mAP75/mAP
    complexity  analytic vs counted parameter and FLOP audit
    data        synthetic paired-image dataset and PPM/PGM formats
    checkpoint  binary parameter serialization
    cli         command-line entry point
"""

__version__ = "0.1.0"
