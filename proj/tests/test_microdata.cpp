#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "statfuse/microdata.hpp"

using namespace statfuse;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("statfuse_microdata_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

void write(const fs::path& p, const std::string& text) {
    std::ofstream out(p);
    out << text;
}

const char* kSchema =
    "[id]\nrole = id\n\n"
    "[tenure]\nrole = predictor\nkind = categorical\nlevels = Owner,Renter\n\n"
    "[income]\nrole = predictor\nkind = continuous\n\n"
    "[elec]\nrole = fusion\nkind = semicontinuous\n\n"
    "[w]\nrole = weight\nkind = continuous\n";

Microdata small_table(bool with_fusion = true) {
    std::vector<Column> cols;
    Column id;
    id.spec = {"id", ColumnKind::categorical, ColumnRole::id, {}};
    id.text = {"a", "b", "c"};
    Column tenure;
    tenure.spec = {"tenure", ColumnKind::categorical, ColumnRole::predictor, {"Owner", "Renter"}};
    tenure.codes = {0, 1, 0};
    Column inc;
    inc.spec = {"income", ColumnKind::continuous, ColumnRole::predictor, {}};
    inc.values = {1.5, 0.1 + 0.2, -7e-300};
    Column w;
    w.spec = {"w", ColumnKind::continuous, ColumnRole::weight, {}};
    w.values = {1, 2, 3};
    cols = {id, tenure, inc, w};
    if (with_fusion) {
        Column elec;
        elec.spec = {"elec", ColumnKind::semicontinuous, ColumnRole::fusion, {}};
        elec.values = {0, 12.5, 3};
        cols.insert(cols.begin() + 3, elec);
    }
    return Microdata(cols);
}

}  // namespace

TEST(Microdata, LoadsThreeRowCsv) {
    const auto dir = scratch("load");
    write(dir / "d.schema", kSchema);
    write(dir / "d.csv", "id,tenure,income,elec,w\nx,Owner,1,0,1\ny,Renter,2,5.5,2\nz,Owner,3,0,1.5\n");
    const Microdata m = load_microdata((dir / "d.csv").string());
    EXPECT_EQ(m.rows(), 3u);
    EXPECT_EQ(m.column("tenure").codes, (std::vector<int>{0, 1, 0}));
    EXPECT_EQ(m.weights(), (std::vector<double>{1, 2, 1.5}));
    EXPECT_EQ(m.row_ids(), (std::vector<std::string>{"x", "y", "z"}));
}

TEST(Microdata, RejectsUnknownLevelNamingRowAndLevel) {
    const auto dir = scratch("level");
    write(dir / "d.schema", kSchema);
    write(dir / "d.csv", "id,tenure,income,elec,w\nx,Owner,1,0,1\ny,Squatter,2,5.5,2\n");
    try {
        load_microdata((dir / "d.csv").string());
        FAIL() << "expected a contract error";
    } catch (const ContractError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("Squatter"), std::string::npos) << msg;
        EXPECT_NE(msg.find("row 2"), std::string::npos) << msg;
    }
}

TEST(Microdata, RejectsZeroWeightAndMissingCells) {
    const auto dir = scratch("weight");
    write(dir / "d.schema", kSchema);
    write(dir / "d.csv", "id,tenure,income,elec,w\nx,Owner,1,0,0\n");
    EXPECT_THROW(load_microdata((dir / "d.csv").string()), ContractError);
    write(dir / "d.csv", "id,tenure,income,elec,w\nx,Owner,,0,1\n");
    EXPECT_THROW(load_microdata((dir / "d.csv").string()), ContractError);
    write(dir / "d.csv", "id,tenure,elec,w\nx,Owner,0,1\n");
    try {
        load_microdata((dir / "d.csv").string());
        FAIL();
    } catch (const ContractError& e) {
        EXPECT_NE(std::string(e.what()).find("income"), std::string::npos);
    }
}

TEST(Microdata, MissingFileIsIoError) {
    EXPECT_THROW(load_microdata("/nonexistent/x.csv", load_schema("/nonexistent/x.schema")), IoError);
}

TEST(Microdata, SchemaInvariants) {
    Schema s{{"w", ColumnKind::continuous, ColumnRole::weight, {}},
             {"c", ColumnKind::categorical, ColumnRole::predictor, {"a", "a"}}};
    EXPECT_THROW(validate_schema(s), ContractError);
    s[1].levels = {};
    EXPECT_THROW(validate_schema(s), ContractError);
    s[1].levels = {"a", "b"};
    EXPECT_NO_THROW(validate_schema(s));
    s.push_back({"w2", ColumnKind::continuous, ColumnRole::weight, {}});
    EXPECT_THROW(validate_schema(s), ContractError);
}

TEST(Microdata, WriteThenLoadIsExact) {
    const auto dir = scratch("roundtrip");
    const Microdata m = small_table();
    save_microdata((dir / "t.csv").string(), m);
    const Microdata back = load_microdata((dir / "t.csv").string());
    ASSERT_EQ(back.rows(), m.rows());
    EXPECT_EQ(back.schema(), m.schema());
    for (std::size_t i = 0; i < m.columns().size(); ++i) {
        EXPECT_EQ(back.columns()[i].values, m.columns()[i].values);
        EXPECT_EQ(back.columns()[i].codes, m.columns()[i].codes);
        EXPECT_EQ(back.columns()[i].text, m.columns()[i].text);
    }
    EXPECT_EQ(back.fingerprint(), m.fingerprint());
}

TEST(Compatibility, ReportsAllViolations) {
    const Microdata donor = small_table();
    const Microdata recipient = small_table(false);
    EXPECT_TRUE(check_compatibility(donor, recipient, {"tenure", "income"}, {"elec"}).ok());
    EXPECT_TRUE(check_compatibility(donor, donor, {"tenure", "income"}, {}).ok());
    // fusion variable present in recipient
    EXPECT_FALSE(check_compatibility(donor, donor, {"tenure"}, {"elec"}).ok());

    std::vector<Column> cols = recipient.columns();
    cols[1].spec.levels = {"Renter", "Tenant"};
    const Microdata odd(cols);
    const auto rep = check_compatibility(donor, odd, {"tenure"}, {"elec"});
    ASSERT_FALSE(rep.ok());
    bool owner_flagged = false;
    for (const auto& v : rep.violations) owner_flagged |= v.find("'Owner'") != std::string::npos;
    EXPECT_TRUE(owner_flagged);
    EXPECT_GE(rep.violations.size(), 2u);
}
