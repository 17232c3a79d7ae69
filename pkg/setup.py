from setuptools import setup, find_packages

setup(
    name="tactile-grasp-lab",
    version="1.0.0",
    description="Tactile re-grasping lab: bar-and-load grasp simulator, transformer/CNN SAC policies and benchmark harness",
    packages=find_packages(exclude=["examples", "examples.*"]),
    python_requires=">=3.9,<3.13",
    install_requires=[
        "Django>=4.2.16,<5.0",
        "python-decouple>=3.8",
        "dj-database-url>=2.1.0",
        "numpy>=1.26,<3.0",
        "gymnasium>=0.29.1",
        "scipy>=1.11",
    ],
)
