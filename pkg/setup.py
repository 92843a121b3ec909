from setuptools import setup

with open("functions/requirements.txt") as f:
    requirements = [line.strip() for line in f if line.strip() and not line.startswith("#")]

setup(
    name="debiaser",
    version="0.1",
    packages=["debiaser"],
    package_dir={"": "functions"},
    install_requires=requirements,
    extras_require={"test": ["pytest"]},
    entry_points={"console_scripts": ["debias=debiaser.cli:main"]},
)
