import setuptools
import glob
import os

NAME = 'mlecs'
DESCRIPTION = 'Desk-scale simulator of multimodal edge-cloud collaborative ' \
              'learning with LoRA-adapted backbones.'
VERSION = '0.1.0'

here = os.path.abspath(os.path.dirname(__file__))

try:
    with open(os.path.join(here, 'README.md')) as readme:
        long_description = '\n{}'.format(readme.read())
except Exception as exc:
    # Probably didn't find the file?
    long_description = DESCRIPTION


setuptools.setup(
    name=NAME,
    version=VERSION,
    description=DESCRIPTION,
    license='GNU GPLv2',
    long_description=long_description,
    long_description_content_type='text/markdown',
    install_requires=[
        'numpy>=1.20',
        'scipy>=1.6',
        'scikit-learn>=0.24',
        'PyYAML>=5.1',
        'setuptools',
    ],
    extras_require={
        'test': ['pytest>=6'],
    },
    python_requires='>=3.7',
    packages=['mlecs'],
    package_dir={'mlecs': 'src'},
    scripts=glob.glob('scripts/*'),
    keywords='multimodal federated edge cloud lora contrastive simulation',
    classifiers=[
        'License :: OSI Approved :: GNU General Public License v2 (GPLv2)',
        'Programming Language :: Python :: 3',
        'Operating System :: OS Independent',
        'Topic :: Software Development :: Libraries :: Python Modules',
        'Topic :: Scientific/Engineering :: Artificial Intelligence',
    ]
)

# end
