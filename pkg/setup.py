from setuptools import setup, find_packages

setup(
    name="advfedkd",
    version="0.1.0",
    description="Federated adversarial learning with pretrained-teacher mixture distillation",
    author="advfedkd developers",
    packages=find_packages(exclude=["tests", "scripts"]),
    install_requires=[
        "numpy>=1.24",
        "scipy>=1.10",
        "scikit-learn>=1.3",
        "pandas>=1.5",
        "pydantic>=2.0.0",
        "tomli>=2.0; python_version < '3.11'",
    ],
    extras_require={"test": ["pytest>=7.0"]},
    entry_points={
        "console_scripts": [
            "advfedkd=advfedkd.cli:main",
        ],
    },
    python_requires=">=3.9",
)
