from setuptools import setup

setup(
    name="flexmesh",
    version="0.1.0",
    py_modules=[
        "cli",
        "config",
        "deform_solver",
        "errors",
        "guidance",
        "main",
        "mesh_core",
        "metrics",
        "nnkit",
        "pfode",
        "pipeline",
        "render",
        "temporal",
        "trajectory",
    ],
    package_dir={"": "src"},
    install_requires=[
        "numpy>=1.22",
        "scipy>=1.8",
        "Pillow>=9.0",
        "tqdm>=4.60",
        "requests>=2.25",
    ],
    extras_require={
        "cholmod": ["scikit-sparse"],
        "test": ["pytest>=7"],
    },
    entry_points={
        "console_scripts": [
            "flexmesh = cli:main",
        ],
    },
    python_requires=">=3.9",
)
