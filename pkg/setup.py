#!/usr/bin/env python3
"""Setup script for maskplan - masked-diffusion trajectory planner."""

from setuptools import setup, find_packages

long_description = """
# maskplan - Masked-Diffusion Trajectory Planner

A discrete masked-diffusion planner for ego-vehicle trajectories with a
block-level mixture of experts: a generation expert decodes waypoint tokens
by parallel unmasking and a refinement expert re-emits the finished
sequence to fix outlier tokens.

## Features
- Trajectory tokenizer (0.05 m / 0.1 degree bins)
- Self-contained reverse-mode autodiff engine on numpy
- Cosine and uniform unmasking schedules with snapshot paths
- Small kinematic simulator with a PDMS-like scorer and a lattice expert
- SFT, then GRPO plus offline/online refinement RL
- Command line interface and static SVG plots

## Usage
```python
from maskplan import PlannerPipeline

pipeline = PlannerPipeline()
pipeline.gen_scenes(32, "easy", 0, "train.jsonl")
pipeline.sft("runs/train.jsonl", "sft.ckpt")
```
"""

setup(
    name="maskplan",
    version="0.1.0",
    description="Masked-diffusion trajectory planner with a refinement expert and RL fine-tuning",
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=find_packages(exclude=["examples", "examples.*"]),
    classifiers=[
        "Development Status :: 3 - Alpha",
        "Intended Audience :: Science/Research",
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
        "License :: OSI Approved :: MIT License",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
        "Programming Language :: Python :: 3.12",
    ],
    python_requires=">=3.9",
    install_requires=[
        "numpy>=1.22.0",
        "shapely>=2.0.0",
        "matplotlib>=3.5.0",
        "tqdm>=4.60.0",
    ],
    extras_require={
        "dev": [
            "pytest>=7.0.0",
            "black>=22.0.0",
            "flake8>=4.0.0",
            "mypy>=0.950",
        ]
    },
    entry_points={
        "console_scripts": [
            "maskplan=maskplan.cli:main",
        ],
    },
    keywords="motion planning trajectory masked diffusion mixture of experts reinforcement learning grpo",
)
