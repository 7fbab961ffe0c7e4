#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

std::string bin() {
  const char* b = std::getenv("DENSEVOX_BIN");
  if (!b) {
    ADD_FAILURE() << "DENSEVOX_BIN not set";
    return "false";
  }
  return b;
}

int run(const std::string& args, std::string* out = nullptr) {
  const fs::path tmp = fs::temp_directory_path() / ("cli_out_" + std::to_string(::getpid()));
  const int rc = std::system((bin() + " " + args + " > " + tmp.string() + " 2>&1").c_str());
  if (out) {
    std::ifstream f(tmp);
    std::ostringstream os;
    os << f.rdbuf();
    *out = os.str();
  }
  fs::remove(tmp);
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("clitest_" + std::to_string(::getpid()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  fs::path dir_;
};

TEST_F(CliTest, HelpExitsZero) {
  std::string out;
  EXPECT_EQ(run("--help", &out), 0);
  EXPECT_NE(out.find("generate-phantom"), std::string::npos);
  EXPECT_NE(out.find("evaluate"), std::string::npos);
}

TEST_F(CliTest, UsageErrorsExitTwo) {
  EXPECT_EQ(run(""), 2);                         // a subcommand is required
  EXPECT_EQ(run("no-such-subcommand"), 2);
  EXPECT_EQ(run("evaluate --bogus-flag x"), 2);
  EXPECT_EQ(run("evaluate"), 2);                 // missing required options
}

TEST_F(CliTest, MissingInputFileExitsThree) {
  EXPECT_EQ(run("evaluate --pred " + (dir_ / "nope.rawvol").string() + " --ref " +
                (dir_ / "nope.rawvol").string()),
            3);
}

TEST_F(CliTest, InvalidDataExitsFour) {
  std::ofstream(dir_ / "junk.rawvol") << "not a volume";
  EXPECT_EQ(run("evaluate --pred " + (dir_ / "junk.rawvol").string() + " --ref " +
                (dir_ / "junk.rawvol").string()),
            4);
}

TEST_F(CliTest, GradcheckPasses) {
  std::string out;
  EXPECT_EQ(run("gradcheck --op prelu --seed 1", &out), 0);
  EXPECT_NE(out.find("PASS"), std::string::npos);
  EXPECT_EQ(out.find("FAIL"), std::string::npos);
}

TEST_F(CliTest, GeneratePhantomThenSelfEvaluate) {
  const fs::path data = dir_ / "data";
  ASSERT_EQ(run("generate-phantom --out " + data.string() + " --subjects 1 --dims 16 --seed 5"), 0);
  EXPECT_TRUE(fs::exists(data / "manifest.tsv"));

  // locate the one generated labels volume through the manifest
  std::ifstream mf(data / "manifest.tsv");
  std::string line;
  ASSERT_TRUE(std::getline(mf, line));
  const auto tab = line.find('\t');
  ASSERT_NE(tab, std::string::npos);
  fs::path subj(line.substr(tab + 1));
  if (subj.is_relative()) subj = data / subj;
  const fs::path labels = subj / "labels.rawvol";
  ASSERT_TRUE(fs::exists(labels));

  // a labeling evaluated against itself is a perfect segmentation
  std::string out;
  ASSERT_EQ(run("evaluate --pred " + labels.string() + " --ref " + labels.string() + " --out " +
                    (dir_ / "report.csv").string(),
                &out),
            0);
  EXPECT_NE(out.find("CSF"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir_ / "report.csv"));
  std::ifstream rep(dir_ / "report.csv");
  std::ostringstream os;
  os << rep.rdbuf();
  EXPECT_NE(os.str().find("1"), std::string::npos);

  // repeating the generation overwrites deterministically rather than failing
  EXPECT_EQ(run("generate-phantom --out " + data.string() + " --subjects 1 --dims 16 --seed 5"), 0);
}

}  // namespace
