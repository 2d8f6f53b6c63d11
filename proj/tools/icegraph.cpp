// icegraph CLI — placeholder while the library comes up; real subcommands land
// with the pipeline modules.
int main() { return 0; }
