#include <cstdio>

int main() {
  std::puts("batrfst: subcommands pending");
  return 1;
}
