from mixant.cli import main

main(prog_name="mixant")
