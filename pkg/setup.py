import os
from setuptools import setup

def read(fname):
    return open(os.path.join(os.path.dirname(__file__), fname)).read()

setup(
    name = "cardioradiomics",
    version = "0.0.1",
    description = ("Radiomic and atlas-deformation features for cardiovascular disease classification from cardiac CT"),
    license = "Apache 2.0",
    keywords = "radiomics registration atlas cardiac ct classification",
    packages=['cardioradiomics', 'cardioradiomics.classifier', 'cardioradiomics.examples',
              'cardioradiomics.io', 'cardioradiomics.radiomics'],
    install_requires=['numpy', 'scipy', 'nibabel', 'pandas>=1.5', 'scikit-learn'],
    extras_require={'test': ['pytest']},
    entry_points={'console_scripts': ['cardioradiomics = cardioradiomics.cli:main']},
    long_description=read('README.md'),
)
