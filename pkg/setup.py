from setuptools import setup, find_packages

version = '1.0.0dev'

setup(
    name='codispatch',
    version=version,
    description="Transmission and distribution co-optimization with "
                "market-based incentive signals",
    long_description="""
    """,
    # Get strings from http://pypi.python.org/pypi?%3Aaction=list_classifiers
    classifiers=[],
    keywords='power systems, economic dispatch, voltage regulation',
    author='',
    author_email='',
    url='',
    license='MIT',
    packages=find_packages(exclude=['ez_setup', 'examples', 'tests']),
    include_package_data=True,
    package_data={
        'codispatch': ['cases/*.json', 'cases/*.md'],
    },
    zip_safe=False,
    python_requires='>=3.10',
    install_requires=[
        'click',
        'numpy',
        'networkx',
        'pyyaml',
        'unicodecsv',
    ],
    entry_points="""
    [console_scripts]
    codispatch=codispatch.cli:codispatch
    """,
)
