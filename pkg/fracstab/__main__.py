from fracstab.cli import main

main()
