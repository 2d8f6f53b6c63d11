// Acceptance suite placeholder; criteria land once the pipeline is complete.
int main() { return 0; }
