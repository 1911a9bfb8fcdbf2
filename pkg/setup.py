from setuptools import setup, find_packages

setup(
    name="mlrep",
    version="1.0.0",
    packages=find_packages(exclude=["tests", "tests.*"]),
    install_requires=[
        "numpy>=1.24.0",
        "scipy>=1.10.0",
        "python-dotenv>=1.0.0",
        "pandas>=2.0.0",
        "scikit-learn>=1.2.0",
    ],
    extras_require={
        "test": ["pytest>=7.0.0"],
    },
    entry_points={
        "console_scripts": [
            "mlrep=mlrep.cli:main",
        ],
    },
    python_requires=">=3.9",
    description="Unsupervised multimodal language representations with a convolutional autoencoder",
)
