from setuptools import setup, find_packages

try:
    with open('README.md') as file:
        long_desc = file.read()
except IOError:
    long_desc = ''


setup(
    name='python-kinetic',
    version='0.1.0',
    description=('Simulation and contrast estimation for kinetic interacting particle systems.'),
    author='Lincolwn Martins',
    author_email='lincolwn@gmail.com',
    keywords='interacting particle system mean field hypoelliptic contrast estimation',
    packages=find_packages(exclude=['tests']),
    license='MIT License',
    long_description=long_desc,
    long_description_content_type='text/markdown',
    python_requires='>=3.8',
    install_requires=['numpy', 'scipy', 'pandas', 'pytz'],
    extras_require={'tests': ['pytest', 'hypothesis']},
    entry_points={'console_scripts': ['kinetic=kinetic.cli:main']},
)
