from setuptools import setup, find_packages

setup(
    name="moelab",
    version="0.1.0",
    description="Parameter estimation rates of softmax gating mixtures of experts.",
    author="Christos Kaldis",
    author_email="up1059364@upnet.gr",
    packages=find_packages(where="src"),
    package_dir={"": "src"},
    entry_points={"console_scripts": ["moe-lab = moelab.cli:main"]},
)
